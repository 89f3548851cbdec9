//! Static skeleton drawings: three axis-aligned orthographic projections
//! side by side, one SVG per frame.

use std::fmt::Write as _;

use mvpose_core::scene_forge::body::bones;

/// One skeleton to draw; absent joints and their bones are skipped.
pub struct Skeleton {
    pub joints: Vec<Option<[f64; 3]>>,
    pub colour: &'static str,
}

const PANEL: f64 = 300.0;
const MARGIN: f64 = 20.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

pub fn colour(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

/// Axis pairs of the three panels: top (x, y), front (x, z), side (y, z).
const VIEWS: [(&str, usize, usize); 3] = [("top x-y", 0, 1), ("front x-z", 0, 2), ("side y-z", 1, 2)];

pub fn frame_svg(title: &str, skeletons: &[Skeleton]) -> String {
    let points: Vec<[f64; 3]> = skeletons.iter().flat_map(|s| s.joints.iter().flatten().copied()).collect();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    if points.is_empty() {
        (lo, hi) = ([-1000.0; 3], [1000.0; 3]);
    }
    let span = (0..3).map(|a| hi[a] - lo[a]).fold(1.0, f64::max);
    let scale = (PANEL - 2.0 * MARGIN) / span;

    let width = 3.0 * PANEL;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{h}" viewBox="0 0 {width} {h}">"#,
        h = PANEL + 30.0
    );
    let _ = writeln!(s, r#"<text x="10" y="20" font-family="sans-serif" font-size="14">{}</text>"#, escape(title));
    for (v, &(name, ax, ay)) in VIEWS.iter().enumerate() {
        let x0 = v as f64 * PANEL;
        let y0 = 30.0;
        let _ = writeln!(
            s,
            r##"<g><rect x="{x}" y="{y0}" width="{PANEL}" height="{PANEL}" fill="none" stroke="#999"/><text x="{tx}" y="{ty}" font-family="sans-serif" font-size="11" fill="#555">{name}</text>"##,
            x = x0 + 2.0,
            tx = x0 + 8.0,
            ty = y0 + 14.0
        );
        let map = |p: &[f64; 3]| {
            let cx = (lo[ax] + hi[ax]) / 2.0;
            let cy = (lo[ay] + hi[ay]) / 2.0;
            (x0 + PANEL / 2.0 + (p[ax] - cx) * scale, y0 + PANEL / 2.0 - (p[ay] - cy) * scale)
        };
        for sk in skeletons {
            for (a, b) in bones(sk.joints.len()) {
                if let (Some(pa), Some(pb)) = (sk.joints[a], sk.joints[b]) {
                    let ((x1, y1), (x2, y2)) = (map(&pa), map(&pb));
                    let _ = writeln!(
                        s,
                        r#"<line x1="{x1:.1}" y1="{y1:.1}" x2="{x2:.1}" y2="{y2:.1}" stroke="{}" stroke-width="2"/>"#,
                        sk.colour
                    );
                }
            }
            for p in sk.joints.iter().flatten() {
                let (x, y) = map(p);
                let _ = writeln!(s, r#"<circle cx="{x:.1}" cy="{y:.1}" r="2.5" fill="{}"/>"#, sk.colour);
            }
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
