//! SVG overlay of one episode on its canvas frame: hotspot heat, past hand
//! track, ground-truth future (solid) and forecast candidates (dashed).

use std::fmt::Write;

use egohoi::baselines::last_object_center;
use egohoi::geometry::{PixelPoint, Side};
use egohoi::inference::Prediction;
use egohoi::metrics::build_hotspot;
use egohoi::synthgen::ObservationSequence;
use egohoi::{Result, RunConfig};

const CELL: usize = 2;
const SCALE: f64 = 4.0;

fn side_colour(side: Side) -> &'static str {
    match side {
        Side::Right => "#c0392b",
        Side::Left => "#2471a3",
    }
}

fn side_name(side: Side) -> &'static str {
    match side {
        Side::Right => "right",
        Side::Left => "left",
    }
}

fn polyline(out: &mut String, points: &[PixelPoint<f64>], attrs: &str) {
    let pts: Vec<String> = points.iter().map(|p| format!("{:.4},{:.4}", p.u, p.v)).collect();
    let _ = writeln!(out, r#"<polyline points="{}" fill="none" {attrs}/>"#, pts.join(" "));
}

pub fn render(ep: &ObservationSequence, prediction: Option<&Prediction>, cfg: &RunConfig) -> Result<String> {
    let spec = &ep.spec;
    let (w, h) = (spec.image_width, spec.image_height);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {w} {h}" data-episode-seed="{}">"#,
        w * SCALE,
        h * SCALE,
        ep.seed
    );
    let _ = writeln!(s, "<metadata><![CDATA[\n{}]]></metadata>", cfg.to_toml()?.replace("]]>", "]]]]><![CDATA[>"));
    let _ = writeln!(s, r##"<rect class="canvas" x="0" y="0" width="{w}" height="{h}" fill="#f4f1ea"/>"##);

    let contacts: Vec<PixelPoint<f64>> = match prediction {
        Some(p) => p
            .candidates
            .iter()
            .flat_map(|c| c.sides.iter().flat_map(|sp| sp.contacts.points.iter().copied()))
            .collect(),
        None => ep.gt.contact_points(),
    };
    if !contacts.is_empty() {
        let sigma = cfg.eval.sigma_frac * w;
        let map = build_hotspot(&contacts, sigma, w as usize, h as usize)?;
        let peak = map.data.iter().cloned().fold(0.0, f64::max);
        let _ = writeln!(s, r#"<g class="hotspot">"#);
        for y in (0..map.height).step_by(CELL) {
            for x in (0..map.width).step_by(CELL) {
                let v = map.at(x, y) / peak;
                if v > 0.02 {
                    let _ = writeln!(
                        s,
                        r##"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="#f39c12" fill-opacity="{v:.3}"/>"##
                    );
                }
            }
        }
        let _ = writeln!(s, "</g>");
    }

    let obj = last_object_center(ep);
    let _ = writeln!(
        s,
        r##"<rect class="object" x="{:.4}" y="{:.4}" width="4" height="4" fill="none" stroke="#555" stroke-width="0.5"/>"##,
        obj.u - 2.0,
        obj.v - 2.0
    );

    for side in Side::BOTH {
        let Some(truth) = ep.gt.side(side) else { continue };
        let colour = side_colour(side);
        let name = side_name(side);
        for p in truth.past_canvas.iter().flatten() {
            let _ = writeln!(
                s,
                r#"<circle class="past" data-side="{name}" cx="{:.4}" cy="{:.4}" r="0.8" fill="{colour}" fill-opacity="0.4"/>"#,
                p.u,
                p.v
            );
        }
        polyline(
            &mut s,
            &truth.trajectory.waypoints,
            &format!(r#"class="gt" data-side="{name}" stroke="{colour}" stroke-width="0.8""#),
        );
        for (t, p) in truth.trajectory.waypoints.iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<circle class="gt-wp" data-side="{name}" data-t="{t}" cx="{:.4}" cy="{:.4}" r="1" fill="{colour}"/>"#,
                p.u,
                p.v
            );
        }
        let c = truth.contact_point;
        let _ = writeln!(
            s,
            r#"<circle class="gt-contact" data-side="{name}" cx="{:.4}" cy="{:.4}" r="1.6" fill="none" stroke="{colour}" stroke-width="0.5"/>"#,
            c.u,
            c.v
        );
    }

    if let Some(p) = prediction {
        for cand in &p.candidates {
            for sp in &cand.sides {
                let colour = side_colour(sp.side);
                let name = side_name(sp.side);
                let k = cand.index;
                polyline(
                    &mut s,
                    &sp.trajectory.waypoints,
                    &format!(
                        r#"class="pred" data-candidate="{k}" data-side="{name}" stroke="{colour}" stroke-width="0.4" stroke-dasharray="1.5 1" stroke-opacity="0.7""#
                    ),
                );
                for (t, q) in sp.trajectory.waypoints.iter().enumerate() {
                    let _ = writeln!(
                        s,
                        r#"<circle class="pred-wp" data-candidate="{k}" data-side="{name}" data-t="{t}" cx="{:.4}" cy="{:.4}" r="0.6" fill="{colour}" fill-opacity="0.7"/>"#,
                        q.u,
                        q.v
                    );
                }
            }
        }
    }
    let _ = writeln!(s, "</svg>");
    Ok(s)
}
