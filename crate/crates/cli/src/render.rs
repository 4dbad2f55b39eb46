//! Deterministic SVG rendering of event-study curves.

use std::fmt::Write as _;

use didlab::aggregate::{EventStudyCurve, Interval};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 72.0;
const RIGHT: f64 = 24.0;
const TOP: f64 = 24.0;
const BOTTOM: f64 = 56.0;

struct Scale {
    d0: f64,
    d1: f64,
    r0: f64,
    r1: f64,
}

impl Scale {
    fn map(&self, v: f64) -> f64 {
        self.r0 + (v - self.d0) / (self.d1 - self.d0) * (self.r1 - self.r0)
    }
}

fn nice_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let f = raw / mag;
    let nice = if f <= 1.0 {
        1.0
    } else if f <= 2.0 {
        2.0
    } else if f <= 5.0 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

fn outer(p: &didlab::aggregate::EventStudyPoint) -> Interval {
    p.simultaneous.unwrap_or(p.pointwise)
}

/// Renders estimates against event time with pointwise (black) and
/// simultaneous (red) intervals and a dashed line at the treatment date.
pub fn render_event_study(curve: &EventStudyCurve) -> String {
    let points = &curve.points;
    let (emin, emax) = points.iter().fold((i64::MAX, i64::MIN), |(a, b), p| (a.min(p.event_time), b.max(p.event_time)));
    let (emin, emax) = if points.is_empty() { (-1, 0) } else { (emin.min(-1), emax.max(0)) };
    let (mut lo, mut hi) = points.iter().fold((0.0f64, 0.0f64), |(a, b), p| {
        let o = outer(p);
        (a.min(o.lower).min(p.estimate), b.max(o.upper).max(p.estimate))
    });
    if !(hi - lo).is_finite() || hi - lo <= 0.0 {
        lo -= 1.0;
        hi += 1.0;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let x = Scale { d0: emin as f64 - 0.5, d1: emax as f64 + 0.5, r0: LEFT, r1: WIDTH - RIGHT };
    let y = Scale { d0: lo, d1: hi, r0: HEIGHT - BOTTOM, r1: TOP };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);

    let step = nice_step(hi - lo);
    let mut tick = (lo / step).ceil() * step;
    while tick <= hi + 1e-12 {
        let ty = y.map(tick);
        let label = if tick.abs() < step * 1e-9 { 0.0 } else { tick };
        let _ = writeln!(
            s,
            r##"<line class="grid" x1="{LEFT:.2}" y1="{ty:.2}" x2="{:.2}" y2="{ty:.2}" stroke="#e5e5e5"/>"##,
            WIDTH - RIGHT
        );
        let _ =
            writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, LEFT - 6.0, ty + 4.0, trim(label));
        tick += step;
    }
    let zero = y.map(0.0);
    let _ = writeln!(
        s,
        r##"<line class="zero" x1="{LEFT:.2}" y1="{zero:.2}" x2="{:.2}" y2="{zero:.2}" stroke="#777777"/>"##,
        WIDTH - RIGHT
    );
    let ref_x = x.map(-0.5);
    let _ = writeln!(
        s,
        r##"<line class="reference" x1="{ref_x:.2}" y1="{TOP:.2}" x2="{ref_x:.2}" y2="{:.2}" stroke="#777777" stroke-dasharray="4 4"/>"##,
        HEIGHT - BOTTOM
    );
    let axis_y = HEIGHT - BOTTOM;
    let _ = writeln!(
        s,
        r#"<line class="axis" x1="{LEFT:.2}" y1="{axis_y:.2}" x2="{:.2}" y2="{axis_y:.2}" stroke="black"/>"#,
        WIDTH - RIGHT
    );
    let _ = writeln!(
        s,
        r#"<line class="axis" x1="{LEFT:.2}" y1="{TOP:.2}" x2="{LEFT:.2}" y2="{axis_y:.2}" stroke="black"/>"#
    );
    for e in emin..=emax {
        let tx = x.map(e as f64);
        let _ = writeln!(s, r#"<text x="{tx:.2}" y="{:.2}" text-anchor="middle">{e}</text>"#, axis_y + 18.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">Event time</text>"#,
        (LEFT + WIDTH - RIGHT) / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">Estimate</text>"#,
        (TOP + axis_y) / 2.0,
        (TOP + axis_y) / 2.0
    );

    for p in points {
        let px = x.map(p.event_time as f64);
        if let Some(sim) = p.simultaneous {
            let (a, b) = (y.map(sim.lower), y.map(sim.upper));
            let _ = writeln!(
                s,
                r##"<line class="simultaneous" x1="{px:.2}" y1="{a:.2}" x2="{px:.2}" y2="{b:.2}" stroke="#c0392b" stroke-width="1.5"/>"##
            );
            for cap in [a, b] {
                let _ = writeln!(
                    s,
                    r##"<line class="cap" x1="{:.2}" y1="{cap:.2}" x2="{:.2}" y2="{cap:.2}" stroke="#c0392b" stroke-width="1.5"/>"##,
                    px - 5.0,
                    px + 5.0
                );
            }
        }
        let (a, b) = (y.map(p.pointwise.lower), y.map(p.pointwise.upper));
        let _ = writeln!(
            s,
            r#"<line class="pointwise" x1="{px:.2}" y1="{a:.2}" x2="{px:.2}" y2="{b:.2}" stroke="black" stroke-width="3"/>"#
        );
        let _ =
            writeln!(s, r#"<circle class="estimate" cx="{px:.2}" cy="{:.2}" r="4" fill="black"/>"#, y.map(p.estimate));
    }
    s.push_str("</svg>\n");
    s
}

fn trim(v: f64) -> String {
    let t = format!("{v:.6}");
    let t = t.trim_end_matches('0').trim_end_matches('.');
    if t == "-0" {
        "0".into()
    } else {
        t.into()
    }
}
