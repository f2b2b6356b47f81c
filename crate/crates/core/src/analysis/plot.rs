use std::fmt::Write;

use super::{LinearFit, WithinQuestionPoint};

const SIZE: f64 = 400.0;
const PAD: f64 = 40.0;

fn px(v: f64) -> f64 {
    PAD + v.clamp(0.0, 1.0) * (SIZE - 2.0 * PAD)
}

fn py(v: f64) -> f64 {
    SIZE - px(v)
}

/// Scatter of clean rate (x) against hallucinated rate (y) with the y = x
/// diagonal and, when given, the fitted line.
pub fn scatter_svg(points: &[WithinQuestionPoint], fit: Option<&LinearFit>) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (lo, hi) = (px(0.0), px(1.0));
    let _ = writeln!(
        s,
        r#"<rect x="{lo}" y="{lo}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        hi - lo,
        hi - lo
    );
    let _ = writeln!(
        s,
        r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="gray" stroke-dasharray="4 4"/>"#,
        px(0.0),
        py(0.0),
        px(1.0),
        py(1.0)
    );
    if let Some(f) = fit {
        let y0 = f.intercept;
        let y1 = f.intercept + f.slope;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{:.2}" x2="{}" y2="{:.2}" stroke="crimson" stroke-width="2"/>"#,
            px(0.0),
            py(y0),
            px(1.0),
            py(y1)
        );
    }
    for p in points {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="steelblue" fill-opacity="0.6"><title>{}</title></circle>"#,
            px(p.clean_rate),
            py(p.hallucinated_rate),
            escape(&p.question_id)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">correct rate, clean traces</text>"#,
        SIZE / 2.0,
        SIZE - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" font-size="12" transform="rotate(-90 12 {})" text-anchor="middle">correct rate, hallucinated traces</text>"#,
        SIZE / 2.0,
        SIZE / 2.0
    );
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
