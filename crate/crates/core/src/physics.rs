//! Platform statics: point masses, corner forces and the center of mass.
//!
//! Coordinates are millimetres with the origin at load cell 1. Cell 2 sits at
//! `(0, m)`, cell 3 at `(n, m)` and cell 4 at `(n, 0)`. Forces are carried as
//! grams-force throughout, so a reading can be compared directly with the
//! mass that produced it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default degeneracy threshold for the summed corner force, in grams.
pub const DEFAULT_EPSILON_G: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhysicsError {
    #[error("empty mass system (no items or non-positive total mass)")]
    EmptySystem,
    #[error("item {id} at ({x}, {y}) lies outside the {n} x {m} mm platform")]
    OutOfBounds {
        id: String,
        x: f64,
        y: f64,
        n: f64,
        m: f64,
    },
    #[error("degenerate load: total force {total_g} g is not above {epsilon_g} g")]
    DegenerateLoad { total_g: f64, epsilon_g: f64 },
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("invalid mass item {id}: {reason}")]
    InvalidItem { id: String, reason: String },
}

/// Rectangular measuring platform, `n` mm along x and `m` mm along y.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlatformGeometry {
    #[serde(rename = "n_mm")]
    n: f64,
    #[serde(rename = "m_mm")]
    m: f64,
}

impl PlatformGeometry {
    pub fn new(n: f64, m: f64) -> Result<Self, PhysicsError> {
        let geom = Self { n, m };
        geom.validate()?;
        Ok(geom)
    }

    pub fn validate(&self) -> Result<(), PhysicsError> {
        if !(self.n.is_finite() && self.n > 0.0 && self.m.is_finite() && self.m > 0.0) {
            return Err(PhysicsError::InvalidGeometry(format!(
                "dimensions must be finite and positive, got n={} m={}",
                self.n, self.m
            )));
        }
        Ok(())
    }

    /// Length along x in mm.
    pub fn n(&self) -> f64 {
        self.n
    }

    /// Length along y in mm.
    pub fn m(&self) -> f64 {
        self.m
    }

    /// Positions of cells 1..4, in cell order.
    pub fn cell_positions(&self) -> [Point; 4] {
        [
            Point::new(0.0, 0.0),
            Point::new(0.0, self.m),
            Point::new(self.n, self.m),
            Point::new(self.n, 0.0),
        ]
    }

    pub fn center(&self) -> Point {
        Point::new(self.n / 2.0, self.m / 2.0)
    }

    pub fn contains(&self, p: Point) -> bool {
        (0.0..=self.n).contains(&p.x) && (0.0..=self.m).contains(&p.y)
    }
}

impl Default for PlatformGeometry {
    fn default() -> Self {
        Self { n: 500.0, m: 400.0 }
    }
}

/// Planar position in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn translate(self, dx: f64, dy: f64) -> Self {
        Self::new(self.x + dx, self.y + dy)
    }

    pub fn distance_sq(self, other: Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub String);

impl ItemId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for ItemId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// A point mass resting on the platform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MassItem {
    pub id: ItemId,
    pub mass_g: f64,
    pub pos: Point,
}

impl MassItem {
    pub fn new(id: impl Into<String>, mass_g: f64, pos: Point) -> Self {
        Self {
            id: ItemId::new(id),
            mass_g,
            pos,
        }
    }

    pub fn validate(&self) -> Result<(), PhysicsError> {
        if !(self.mass_g.is_finite() && self.mass_g > 0.0) {
            return Err(PhysicsError::InvalidItem {
                id: self.id.to_string(),
                reason: format!("mass must be finite and positive, got {}", self.mass_g),
            });
        }
        if !(self.pos.x.is_finite() && self.pos.y.is_finite()) {
            return Err(PhysicsError::InvalidItem {
                id: self.id.to_string(),
                reason: "position must be finite".into(),
            });
        }
        Ok(())
    }
}

/// Corner forces F1..F4 in grams-force.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ForceQuad {
    pub f1: f64,
    pub f2: f64,
    pub f3: f64,
    pub f4: f64,
}

impl ForceQuad {
    pub const ZERO: ForceQuad = ForceQuad::new(0.0, 0.0, 0.0, 0.0);

    pub const fn new(f1: f64, f2: f64, f3: f64, f4: f64) -> Self {
        Self { f1, f2, f3, f4 }
    }

    pub fn from_array(cells: [f64; 4]) -> Self {
        Self::new(cells[0], cells[1], cells[2], cells[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.f1, self.f2, self.f3, self.f4]
    }

    /// Summed force of all four cells.
    pub fn total(&self) -> f64 {
        self.f1 + self.f2 + self.f3 + self.f4
    }

    pub fn get(&self, cell: usize) -> f64 {
        self.to_array()[cell]
    }
}

/// One reconstructed hub output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComputedPoint {
    pub total_g: f64,
    pub x: f64,
    pub y: f64,
    pub ts_ms: u64,
    pub seq: u64,
}

/// Mass-weighted mean position of a set of point masses.
pub fn true_center_of_mass(items: &[MassItem]) -> Result<Point, PhysicsError> {
    let total: f64 = items.iter().map(|it| it.mass_g).sum();
    if items.is_empty() || total.is_nan() || total <= 0.0 {
        return Err(PhysicsError::EmptySystem);
    }
    let (sx, sy) = items.iter().fold((0.0, 0.0), |(sx, sy), it| {
        (sx + it.mass_g * it.pos.x, sy + it.mass_g * it.pos.y)
    });
    Ok(Point::new(sx / total, sy / total))
}

/// Splits the weight of every item onto the four corner cells.
///
/// Each item contributes bilinear corner weights, which is the only
/// non-negative per-item split whose corner-force moments give back the
/// item position under [`reconstruct_com`].
pub fn decompose_forces(
    items: &[MassItem],
    geom: &PlatformGeometry,
) -> Result<ForceQuad, PhysicsError> {
    let mut quad = ForceQuad::ZERO;
    for item in items {
        item.validate()?;
        if !geom.contains(item.pos) {
            return Err(PhysicsError::OutOfBounds {
                id: item.id.to_string(),
                x: item.pos.x,
                y: item.pos.y,
                n: geom.n(),
                m: geom.m(),
            });
        }
        let u = item.pos.x / geom.n();
        let v = item.pos.y / geom.m();
        let w = item.mass_g;
        quad.f1 += w * (1.0 - u) * (1.0 - v);
        quad.f2 += w * (1.0 - u) * v;
        quad.f3 += w * u * v;
        quad.f4 += w * u * (1.0 - v);
    }
    Ok(quad)
}

/// Center of mass from the four corner forces.
///
/// `x = (F3 + F4) n / F`, `y = (F2 + F3) m / F` with `F` the summed force.
pub fn reconstruct_com(
    forces: &ForceQuad,
    geom: &PlatformGeometry,
    epsilon_g: f64,
) -> Result<Point, PhysicsError> {
    let total = forces.total();
    if total.is_nan() || total <= epsilon_g {
        return Err(PhysicsError::DegenerateLoad {
            total_g: total,
            epsilon_g,
        });
    }
    let x = (forces.f3 + forces.f4) * geom.n() / total;
    let y = (forces.f2 + forces.f3) * geom.m() / total;
    Ok(Point::new(x, y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geom() -> PlatformGeometry {
        PlatformGeometry::default()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn com_single_item() {
        let c = true_center_of_mass(&[MassItem::new("a", 1000.0, Point::new(250.0, 200.0))]).unwrap();
        assert_eq!(c, Point::new(250.0, 200.0));
    }

    #[test]
    fn com_symmetric_pair() {
        let c = true_center_of_mass(&[
            MassItem::new("a", 500.0, Point::new(0.0, 0.0)),
            MassItem::new("b", 500.0, Point::new(500.0, 400.0)),
        ])
        .unwrap();
        assert_eq!(c, Point::new(250.0, 200.0));
    }

    #[test]
    fn com_weighted_pair() {
        // (1000*100 + 3000*300) / 4000 = 250 on both axes
        let c = true_center_of_mass(&[
            MassItem::new("a", 1000.0, Point::new(100.0, 100.0)),
            MassItem::new("b", 3000.0, Point::new(300.0, 300.0)),
        ])
        .unwrap();
        assert!(close(c.x, 250.0, 1e-12) && close(c.y, 250.0, 1e-12));
    }

    #[test]
    fn com_empty() {
        assert_eq!(true_center_of_mass(&[]), Err(PhysicsError::EmptySystem));
    }

    #[test]
    fn decompose_center_and_corner() {
        let g = geom();
        let q = decompose_forces(&[MassItem::new("a", 1000.0, g.center())], &g).unwrap();
        assert_eq!(q, ForceQuad::new(250.0, 250.0, 250.0, 250.0));
        let q = decompose_forces(&[MassItem::new("a", 1000.0, Point::new(0.0, 0.0))], &g).unwrap();
        assert_eq!(q, ForceQuad::new(1000.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn decompose_off_center() {
        // u = 0.25, v = 0.25
        let g = geom();
        let q = decompose_forces(&[MassItem::new("a", 1000.0, Point::new(125.0, 100.0))], &g).unwrap();
        assert!(close(q.f1, 562.5, 1e-9));
        assert!(close(q.f2, 187.5, 1e-9));
        assert!(close(q.f3, 62.5, 1e-9));
        assert!(close(q.f4, 187.5, 1e-9));
        assert!(close(q.total(), 1000.0, 1e-9));
        let p = reconstruct_com(&q, &g, DEFAULT_EPSILON_G).unwrap();
        assert!(close(p.x, 125.0, 1e-9) && close(p.y, 100.0, 1e-9));
    }

    #[test]
    fn decompose_rejects_out_of_bounds() {
        let g = geom();
        let err = decompose_forces(&[MassItem::new("x", 10.0, Point::new(501.0, 0.0))], &g).unwrap_err();
        assert!(matches!(err, PhysicsError::OutOfBounds { .. }));
        let err = decompose_forces(&[MassItem::new("x", 10.0, Point::new(10.0, -0.1))], &g).unwrap_err();
        assert!(matches!(err, PhysicsError::OutOfBounds { .. }));
    }

    #[test]
    fn reconstruct_examples() {
        let g = geom();
        let p = reconstruct_com(&ForceQuad::new(250.0, 250.0, 250.0, 250.0), &g, 1.0).unwrap();
        assert_eq!(p, Point::new(250.0, 200.0));
        let p = reconstruct_com(&ForceQuad::new(10.0, 20.0, 30.0, 40.0), &g, 1.0).unwrap();
        assert!(close(p.x, 350.0, 1e-12) && close(p.y, 200.0, 1e-12));
        assert!(matches!(
            reconstruct_com(&ForceQuad::ZERO, &g, 1.0),
            Err(PhysicsError::DegenerateLoad { .. })
        ));
    }

    #[test]
    fn geometry_rejects_nonpositive() {
        assert!(PlatformGeometry::new(0.0, 10.0).is_err());
        assert!(PlatformGeometry::new(10.0, f64::NAN).is_err());
    }

    fn arb_items() -> impl Strategy<Value = Vec<MassItem>> {
        prop::collection::vec((1.0f64..5000.0, 0.0f64..=1.0, 0.0f64..=1.0), 1..20).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (mass, u, w))| MassItem::new(format!("i{i}"), mass, Point::new(u * 500.0, w * 400.0)))
                .collect()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn round_trip_matches_oracle(items in arb_items()) {
            let g = geom();
            let truth = true_center_of_mass(&items).unwrap();
            let q = decompose_forces(&items, &g).unwrap();
            let p = reconstruct_com(&q, &g, DEFAULT_EPSILON_G).unwrap();
            prop_assert!((p.x - truth.x).abs() <= 1e-9 * truth.x.abs().max(1.0));
            prop_assert!((p.y - truth.y).abs() <= 1e-9 * truth.y.abs().max(1.0));
        }

        #[test]
        fn conservation_and_bounds(items in arb_items()) {
            let g = geom();
            let mass: f64 = items.iter().map(|i| i.mass_g).sum();
            let q = decompose_forces(&items, &g).unwrap();
            prop_assert!(q.to_array().iter().all(|&f| f >= 0.0));
            prop_assert!((q.total() - mass).abs() <= 1e-9 * mass);
            let p = reconstruct_com(&q, &g, DEFAULT_EPSILON_G).unwrap();
            prop_assert!(p.x >= 0.0 && p.x <= g.n() && p.y >= 0.0 && p.y <= g.m());
        }

        #[test]
        fn translation_consistency(items in arb_items(), dx in -50.0f64..50.0, dy in -50.0f64..50.0) {
            let g = geom();
            // keep everything in bounds after the shift
            let squeezed: Vec<MassItem> = items
                .iter()
                .map(|it| MassItem {
                    pos: Point::new(50.0 + it.pos.x * 0.8, 50.0 + it.pos.y * 0.75),
                    ..it.clone()
                })
                .collect();
            let moved: Vec<MassItem> = squeezed
                .iter()
                .map(|it| MassItem { pos: it.pos.translate(dx, dy), ..it.clone() })
                .collect();
            let a = reconstruct_com(&decompose_forces(&squeezed, &g).unwrap(), &g, 1.0).unwrap();
            let b = reconstruct_com(&decompose_forces(&moved, &g).unwrap(), &g, 1.0).unwrap();
            prop_assert!((b.x - a.x - dx).abs() <= 1e-9 * 500.0);
            prop_assert!((b.y - a.y - dy).abs() <= 1e-9 * 400.0);
        }
    }
}
