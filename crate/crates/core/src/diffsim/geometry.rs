//! Block geometry: shape definitions, derived inertial constants, and the
//! closest-point contact query between the effector disc and the block,
//! generic over the simulator scalar so sensitivities flow through contact.

use serde::{Deserialize, Serialize};

use super::dual::{abs_s, max_const, SimScalar};

/// Pushed block footprint. The T shape is a horizontal bar sitting on top
/// of a vertical stem; the pose origin is the area centroid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlockShape {
    Square {
        side: f64,
    },
    TBlock {
        bar_width: f64,
        bar_height: f64,
        stem_width: f64,
        stem_height: f64,
    },
}

impl Default for BlockShape {
    fn default() -> Self {
        BlockShape::Square { side: 0.06 }
    }
}

impl BlockShape {
    /// Default T footprint: 0.09 x 0.03 bar over a 0.03 x 0.06 stem.
    pub fn default_t() -> Self {
        BlockShape::TBlock {
            bar_width: 0.09,
            bar_height: 0.03,
            stem_width: 0.03,
            stem_height: 0.06,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let dims: Vec<f64> = match *self {
            BlockShape::Square { side } => vec![side],
            BlockShape::TBlock {
                bar_width,
                bar_height,
                stem_width,
                stem_height,
            } => vec![bar_width, bar_height, stem_width, stem_height],
        };
        for d in dims {
            if !(d.is_finite() && d > 0.0) {
                return Err(format!("shape dimension must be positive, got {d}"));
            }
        }
        Ok(())
    }
}

/// Axis-aligned rectangle in the block frame.
#[derive(Debug, Clone, Copy)]
pub struct Rect {
    pub center: [f64; 2],
    pub half: [f64; 2],
}

/// Constants derived from the shape: component rectangles centered on the
/// area centroid, a bounding radius for contact culling, the squared radius
/// of gyration (I/m), and the mean support distance that scales rotational
/// table friction.
#[derive(Debug, Clone)]
pub struct ShapeProps {
    pub rects: Vec<Rect>,
    pub bounding_radius: f64,
    pub gyration_sq: f64,
    pub fric_radius: f64,
}

impl ShapeProps {
    pub fn from_shape(shape: &BlockShape) -> ShapeProps {
        let rects = match *shape {
            BlockShape::Square { side } => vec![Rect {
                center: [0.0, 0.0],
                half: [side / 2.0, side / 2.0],
            }],
            BlockShape::TBlock {
                bar_width,
                bar_height,
                stem_width,
                stem_height,
            } => {
                // Stem centered at the pre-centroid origin, bar stacked on top.
                let bar_cy = stem_height / 2.0 + bar_height / 2.0;
                let a_bar = bar_width * bar_height;
                let a_stem = stem_width * stem_height;
                let centroid_y = a_bar * bar_cy / (a_bar + a_stem);
                vec![
                    Rect {
                        center: [0.0, bar_cy - centroid_y],
                        half: [bar_width / 2.0, bar_height / 2.0],
                    },
                    Rect {
                        center: [0.0, -centroid_y],
                        half: [stem_width / 2.0, stem_height / 2.0],
                    },
                ]
            }
        };

        let mut bounding_radius: f64 = 0.0;
        for r in &rects {
            for sx in [-1.0, 1.0] {
                for sy in [-1.0, 1.0] {
                    let cx = r.center[0] + sx * r.half[0];
                    let cy = r.center[1] + sy * r.half[1];
                    bounding_radius = bounding_radius.max(cx.hypot(cy));
                }
            }
        }

        // Uniform density: I/m = sum_i A_i ((w^2 + h^2)/12 + |c_i|^2) / sum_i A_i.
        let mut area = 0.0;
        let mut second = 0.0;
        for r in &rects {
            let w = 2.0 * r.half[0];
            let h = 2.0 * r.half[1];
            let a = w * h;
            area += a;
            second += a * ((w * w + h * h) / 12.0 + r.center[0] * r.center[0] + r.center[1] * r.center[1]);
        }
        let gyration_sq = second / area;

        // Mean distance from the centroid over the footprint; this sets the
        // friction torque lever arm. Exact, since the footprint is a
        // disjoint union of axis-aligned rectangles.
        let sum: f64 = rects
            .iter()
            .map(|r| {
                rect_radius_integral(
                    r.center[0] - r.half[0],
                    r.center[0] + r.half[0],
                    r.center[1] - r.half[1],
                    r.center[1] + r.half[1],
                )
            })
            .sum();
        let fric_radius = sum / area;

        ShapeProps {
            rects,
            bounding_radius,
            gyration_sq,
            fric_radius,
        }
    }
}

/// Integral of sqrt(x^2 + y^2) over [0, x] x [0, y], x, y >= 0.
fn corner_radius_integral(x: f64, y: f64) -> f64 {
    if x <= 0.0 || y <= 0.0 {
        return 0.0;
    }
    let r = x.hypot(y);
    x * y * r / 3.0 + (y * y * y * (x / y).asinh() + x * x * x * (y / x).asinh()) / 6.0
}

/// Integral of sqrt(x^2 + y^2) over [x0, x1] x [y0, y1] with any signs:
/// split at the axes, reflect each piece into the positive quadrant, and
/// combine corner integrals by inclusion-exclusion.
fn rect_radius_integral(x0: f64, x1: f64, y0: f64, y1: f64) -> f64 {
    let split = |a: f64, b: f64| -> Vec<(f64, f64)> {
        if a < 0.0 && b > 0.0 {
            vec![(0.0, -a), (0.0, b)]
        } else {
            vec![(a.abs().min(b.abs()), a.abs().max(b.abs()))]
        }
    };
    let mut total = 0.0;
    for &(u0, u1) in &split(x0, x1) {
        for &(v0, v1) in &split(y0, y1) {
            total += corner_radius_integral(u1, v1) - corner_radius_integral(u0, v1)
                - corner_radius_integral(u1, v0)
                + corner_radius_integral(u0, v0);
        }
    }
    total
}

/// Closest-feature query result in the block frame. `sdf` is the signed
/// distance from the query point to the shape surface (negative inside),
/// `normal` the outward surface normal, `point` the closest surface point.
pub struct ContactQuery<S> {
    pub sdf: S,
    pub normal: [S; 2],
    pub point: [S; 2],
}

fn rect_query<S: SimScalar>(r: &Rect, px: S, py: S) -> ContactQuery<S> {
    let lx = px - S::from_f64(r.center[0]);
    let ly = py - S::from_f64(r.center[1]);
    let sx = if lx.re() < 0.0 { -1.0 } else { 1.0 };
    let sy = if ly.re() < 0.0 { -1.0 } else { 1.0 };
    let ax = abs_s(lx);
    let ay = abs_s(ly);
    let qx = ax - S::from_f64(r.half[0]);
    let qy = ay - S::from_f64(r.half[1]);

    if qx.re() > 0.0 || qy.re() > 0.0 {
        // Outside: distance to the clamped point on the boundary.
        let dx = max_const(qx, 0.0);
        let dy = max_const(qy, 0.0);
        let dist = (dx * dx + dy * dy).sqrt();
        let nx = dx / dist * S::from_f64(sx);
        let ny = dy / dist * S::from_f64(sy);
        // Closest boundary point: clamp each |coordinate| to the half extent.
        let cpx = (ax - dx) * S::from_f64(sx) + S::from_f64(r.center[0]);
        let cpy = (ay - dy) * S::from_f64(sy) + S::from_f64(r.center[1]);
        ContactQuery {
            sdf: dist,
            normal: [nx, ny],
            point: [cpx, cpy],
        }
    } else if qx.re() > qy.re() {
        // Inside, nearest to a vertical face.
        ContactQuery {
            sdf: qx,
            normal: [S::from_f64(sx), S::from_f64(0.0)],
            point: [S::from_f64(r.center[0] + sx * r.half[0]), py],
        }
    } else {
        ContactQuery {
            sdf: qy,
            normal: [S::from_f64(0.0), S::from_f64(sy)],
            point: [px, S::from_f64(r.center[1] + sy * r.half[1])],
        }
    }
}

/// Query against the whole footprint: the component rectangle with the
/// smallest signed distance wins (union of shapes).
pub fn contact_query<S: SimScalar>(props: &ShapeProps, px: S, py: S) -> ContactQuery<S> {
    let mut best: Option<ContactQuery<S>> = None;
    for r in &props.rects {
        let q = rect_query(r, px, py);
        best = match best {
            None => Some(q),
            Some(b) => {
                if q.sdf.re() < b.sdf.re() {
                    Some(q)
                } else {
                    Some(b)
                }
            }
        };
    }
    best.expect("shape has at least one rectangle")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn square_props_match_closed_forms() {
        let props = ShapeProps::from_shape(&BlockShape::Square { side: 0.06 });
        // I/m for a square of side L is L^2/6.
        assert_relative_eq!(props.gyration_sq, 0.06 * 0.06 / 6.0, max_relative = 1e-12);
        // Mean distance from center over [-a,a]^2 is a*(sqrt(2) + asinh(1))/3.
        let a = 0.03;
        let expected = a * (2.0f64.sqrt() + 1.0f64.asinh()) / 3.0;
        assert_relative_eq!(props.fric_radius, expected, max_relative = 1e-12);
        assert_relative_eq!(props.bounding_radius, a * 2.0f64.sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn tblock_centroid_at_origin() {
        let props = ShapeProps::from_shape(&BlockShape::default_t());
        let mut area = 0.0;
        let mut moment = [0.0, 0.0];
        for r in &props.rects {
            let a = 4.0 * r.half[0] * r.half[1];
            area += a;
            moment[0] += a * r.center[0];
            moment[1] += a * r.center[1];
        }
        assert!(moment[0].abs() / area < 1e-12);
        assert!(moment[1].abs() / area < 1e-12);
        assert!(props.gyration_sq > 0.0 && props.fric_radius > 0.0);
    }

    #[test]
    fn radius_integral_matches_quadrature() {
        // Rectangles straddling the axes in every combination, checked
        // against midpoint-rule quadrature.
        let cases = [
            (0.1, 0.5, 0.2, 0.7),
            (-0.5, -0.1, 0.2, 0.7),
            (-0.3, 0.4, 0.1, 0.6),
            (-0.3, 0.4, -0.5, 0.2),
            (0.0, 0.3, -0.2, 0.0),
        ];
        for (x0, x1, y0, y1) in cases {
            let exact = rect_radius_integral(x0, x1, y0, y1);
            let n = 2000;
            let (dx, dy) = ((x1 - x0) / n as f64, (y1 - y0) / n as f64);
            let mut quad = 0.0;
            for i in 0..n {
                let x: f64 = x0 + (i as f64 + 0.5) * dx;
                for j in 0..n {
                    let y = y0 + (j as f64 + 0.5) * dy;
                    quad += x.hypot(y) * dx * dy;
                }
            }
            assert_relative_eq!(exact, quad, max_relative = 1e-5);
        }
    }

    #[test]
    fn face_corner_and_inside_queries() {
        let props = ShapeProps::from_shape(&BlockShape::Square { side: 0.06 });
        // Right face.
        let q = contact_query(&props, 0.05f64, 0.0f64);
        assert_relative_eq!(q.sdf, 0.02, max_relative = 1e-12);
        assert_relative_eq!(q.normal[0], 1.0, max_relative = 1e-12);
        assert_relative_eq!(q.point[0], 0.03, max_relative = 1e-12);
        assert_relative_eq!(q.point[1], 0.0, epsilon = 1e-15);
        // Corner, 3-4-5 offset.
        let q = contact_query(&props, 0.03 + 0.003, -(0.03 + 0.004));
        assert_relative_eq!(q.sdf, 0.005, max_relative = 1e-12);
        assert_relative_eq!(q.normal[0], 0.6, max_relative = 1e-12);
        assert_relative_eq!(q.normal[1], -0.8, max_relative = 1e-12);
        // Inside, nearest the left face.
        let q = contact_query(&props, -0.025f64, 0.001f64);
        assert_relative_eq!(q.sdf, -0.005, max_relative = 1e-12);
        assert_relative_eq!(q.normal[0], -1.0, max_relative = 1e-12);
        assert_relative_eq!(q.point[0], -0.03, max_relative = 1e-12);
        assert_relative_eq!(q.point[1], 0.001, max_relative = 1e-12);
    }

    #[test]
    fn tblock_union_picks_nearest_component() {
        let props = ShapeProps::from_shape(&BlockShape::default_t());
        // Point far to the right at bar height: the bar must win.
        let bar = props.rects[0];
        let q = contact_query(&props, 0.2f64, bar.center[1]);
        assert_relative_eq!(q.sdf, 0.2 - bar.half[0], max_relative = 1e-12);
        assert_relative_eq!(q.normal[0], 1.0, max_relative = 1e-12);
        // Point below: the stem must win.
        let stem = props.rects[1];
        let stem_bottom = stem.center[1] - stem.half[1];
        let q = contact_query(&props, 0.0, stem_bottom - 0.01);
        assert_relative_eq!(q.sdf, 0.01, max_relative = 1e-9);
        assert_relative_eq!(q.normal[1], -1.0, max_relative = 1e-12);
    }
}
