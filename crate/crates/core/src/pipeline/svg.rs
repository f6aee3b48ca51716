//! Top-down SVG of predictions with uncertainty circles.

use std::fmt::Write;

use crate::scenegen::{MapClass, Scene, RANGE_X, RANGE_Y};

use super::ScenePrediction;

const SCALE: f64 = 10.0;
const COLORS: [&str; 3] = ["#2a9d8f", "#e76f51", "#264653"];

fn to_px(p: [f64; 2]) -> (f64, f64) {
    ((p[0] - RANGE_X[0]) * SCALE, (RANGE_Y[1] - p[1]) * SCALE)
}

/// Predicted polylines whose best score exceeds `min_score`, each vertex
/// drawn with a circle of radius proportional to `‖σ‖`. Ground truth, when
/// given, is drawn dashed underneath.
pub fn render(pred: &ScenePrediction, truth: Option<&Scene>, min_score: f64) -> String {
    let w = (RANGE_X[1] - RANGE_X[0]) * SCALE;
    let h = (RANGE_Y[1] - RANGE_Y[0]) * SCALE;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r##"<rect width="{w}" height="{h}" fill="#fafafa"/>"##);
    if let Some(scene) = truth {
        for e in &scene.elements {
            let pts = path(e.points.points());
            let _ = writeln!(
                s,
                r#"<polyline points="{pts}" fill="none" stroke="{}" stroke-width="1" stroke-dasharray="4 3" opacity="0.5"/>"#,
                COLORS[e.class.index()]
            );
        }
    }
    for e in &pred.elements {
        let (c, score) = e.best();
        if score <= min_score {
            continue;
        }
        let color = COLORS[c];
        let _ = writeln!(
            s,
            r#"<polyline class="{}" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            MapClass::ALL[c].name(),
            path(&e.points)
        );
        if let Some(sig) = &e.sigmas {
            for (p, sg) in e.points.iter().zip(sig) {
                let (x, y) = to_px(*p);
                let r = (sg[0] * sg[0] + sg[1] * sg[1]).sqrt() * SCALE;
                let _ = writeln!(
                    s,
                    r#"<circle cx="{x:.2}" cy="{y:.2}" r="{r:.3}" fill="{color}" fill-opacity="0.15" stroke="{color}" stroke-width="0.5"/>"#
                );
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

fn path(points: &[[f64; 2]]) -> String {
    points
        .iter()
        .map(|&p| {
            let (x, y) = to_px(p);
            format!("{x:.2},{y:.2}")
        })
        .collect::<Vec<_>>()
        .join(" ")
}
