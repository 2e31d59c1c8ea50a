//! Declarative hive scenarios: an initial set of masses on the platform and a
//! list of steps that move the cluster sphere and take away honey strips.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::physics::{ItemId, MassItem, PlatformGeometry, Point};

/// Simulated milliseconds per scenario day.
pub const DAY_MS: u64 = 86_400_000;
/// Mass of one of the smallest strips, about one early-winter day of honey.
pub const SMALL_STRIP_G: f64 = 26.5;
pub const SMALL_STRIP_LEN_MM: f64 = 35.0;
pub const MEDIUM_STRIP_LEN_MM: f64 = 185.0;
pub const LONG_STRIP_LEN_MM: f64 = 355.0;
pub const CLUSTER_MASS_G: f64 = 2000.0;
pub const STRIPS_TOTAL_G: f64 = 30_000.0;
pub const HIVE_BODY_G: f64 = 10_000.0;
pub const SMALL_STRIP_COUNT: usize = 245;
/// Tolerance on the declared strip total.
const MASS_TOLERANCE_G: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid {field}: {reason}")]
    Validation { field: String, reason: String },
    #[error("inventory exhausted: {requested} strips requested, {remaining} remaining")]
    InventoryExhausted { requested: usize, remaining: usize },
    #[error("sphere would leave the platform at ({x}, {y})")]
    SphereOutOfBounds { x: f64, y: f64 },
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Validation {
        field: field.into(),
        reason: reason.into(),
    }
}

/// A honey strip: a mass item with its physical length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Strip {
    #[serde(flatten)]
    pub item: MassItem,
    pub length_mm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioStep {
    /// Planar sphere displacement `(dx, dy)` in mm.
    pub sphere_move: [f64; 2],
    pub strips_removed: usize,
    pub days_represented: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub geometry: PlatformGeometry,
    pub hive_body: MassItem,
    pub sphere: MassItem,
    pub strips_total_g: f64,
    pub strips: Vec<Strip>,
    pub steps: Vec<ScenarioStep>,
}

/// Masses on the platform at one point of a scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct HiveState {
    pub hive_body: MassItem,
    pub sphere: MassItem,
    pub strips: Vec<Strip>,
}

impl HiveState {
    pub fn items(&self) -> Vec<MassItem> {
        let mut items = Vec::with_capacity(self.strips.len() + 2);
        items.push(self.hive_body.clone());
        items.push(self.sphere.clone());
        items.extend(self.strips.iter().map(|s| s.item.clone()));
        items
    }

    pub fn total_mass_g(&self) -> f64 {
        self.hive_body.mass_g + self.sphere.mass_g + self.strips.iter().map(|s| s.item.mass_g).sum::<f64>()
    }
}

/// Applies one step: translate the sphere, then remove the requested number
/// of strips, lightest first and nearest to the sphere among equals, ties
/// going to the smaller id. Returns the new state and the removed strips.
pub fn apply_step(
    state: &HiveState,
    step: &ScenarioStep,
    geometry: &PlatformGeometry,
) -> Result<(HiveState, Vec<Strip>), ScenarioError> {
    let pos = state.sphere.pos.translate(step.sphere_move[0], step.sphere_move[1]);
    if !geometry.contains(pos) {
        return Err(ScenarioError::SphereOutOfBounds { x: pos.x, y: pos.y });
    }
    if step.strips_removed > state.strips.len() {
        return Err(ScenarioError::InventoryExhausted {
            requested: step.strips_removed,
            remaining: state.strips.len(),
        });
    }
    let mut order: Vec<usize> = (0..state.strips.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (&state.strips[a].item, &state.strips[b].item);
        sa.mass_g
            .total_cmp(&sb.mass_g)
            .then_with(|| sa.pos.distance_sq(pos).total_cmp(&sb.pos.distance_sq(pos)))
            .then_with(|| sa.id.cmp(&sb.id))
    });
    let mut remove = vec![false; state.strips.len()];
    for &i in &order[..step.strips_removed] {
        remove[i] = true;
    }
    let mut kept = Vec::with_capacity(state.strips.len() - step.strips_removed);
    let mut removed = Vec::with_capacity(step.strips_removed);
    for (strip, gone) in state.strips.iter().zip(remove) {
        if gone {
            removed.push(strip.clone());
        } else {
            kept.push(strip.clone());
        }
    }
    // removal order, not inventory order
    removed.sort_by(|a, b| {
        a.item
            .mass_g
            .total_cmp(&b.item.mass_g)
            .then_with(|| a.item.pos.distance_sq(pos).total_cmp(&b.item.pos.distance_sq(pos)))
            .then_with(|| a.item.id.cmp(&b.item.id))
    });
    let next = HiveState {
        hive_body: state.hive_body.clone(),
        sphere: MassItem {
            pos,
            ..state.sphere.clone()
        },
        strips: kept,
    };
    Ok((next, removed))
}

/// State after a step, with the scenario clock.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    /// 1-based index of the step just applied.
    pub step: usize,
    /// Days elapsed since the hive was placed.
    pub day: u64,
    pub ts_ms: u64,
    pub removed_g: f64,
    pub state: HiveState,
}

impl Scenario {
    pub fn initial_state(&self) -> HiveState {
        HiveState {
            hive_body: self.hive_body.clone(),
            sphere: self.sphere.clone(),
            strips: self.strips.clone(),
        }
    }

    pub fn total_days(&self) -> u64 {
        self.steps.iter().map(|s| s.days_represented).sum()
    }

    pub fn total_strips_removed(&self) -> usize {
        self.steps.iter().map(|s| s.strips_removed).sum()
    }

    /// Replays all steps, yielding the state after each one.
    pub fn replay(&self) -> Result<Vec<Snapshot>, ScenarioError> {
        let mut state = self.initial_state();
        let mut day = 0;
        let mut removed_g = 0.0;
        let mut out = Vec::with_capacity(self.steps.len());
        for (i, step) in self.steps.iter().enumerate() {
            let (next, removed) = apply_step(&state, step, &self.geometry)?;
            day += step.days_represented;
            removed_g += removed.iter().map(|s| s.item.mass_g).sum::<f64>();
            state = next;
            out.push(Snapshot {
                step: i + 1,
                day,
                ts_ms: day * DAY_MS,
                removed_g,
                state: state.clone(),
            });
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.name.trim().is_empty() {
            return Err(invalid("name", "must not be empty"));
        }
        self.geometry.validate().map_err(|e| invalid("geometry", e.to_string()))?;
        let check_item = |field: &str, item: &MassItem| -> Result<(), ScenarioError> {
            item.validate().map_err(|e| invalid(field, e.to_string()))?;
            if !self.geometry.contains(item.pos) {
                return Err(invalid(field, format!("position ({}, {}) outside platform", item.pos.x, item.pos.y)));
            }
            Ok(())
        };
        check_item("hive_body", &self.hive_body)?;
        check_item("sphere", &self.sphere)?;

        let mut ids: Vec<&ItemId> = vec![&self.hive_body.id, &self.sphere.id];
        for (i, strip) in self.strips.iter().enumerate() {
            check_item(&format!("strips[{i}]"), &strip.item)?;
            if !(strip.length_mm.is_finite() && strip.length_mm > 0.0) {
                return Err(invalid(format!("strips[{i}].length_mm"), "must be positive"));
            }
            ids.push(&strip.item.id);
        }
        ids.sort();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(invalid("strips", format!("duplicate item id {}", w[0])));
        }

        let sum: f64 = self.strips.iter().map(|s| s.item.mass_g).sum();
        if !self.strips_total_g.is_finite() || (sum - self.strips_total_g).abs() > MASS_TOLERANCE_G {
            return Err(invalid(
                "strips_total_g",
                format!("declared {} g but strips sum to {sum} g", self.strips_total_g),
            ));
        }

        let mut remaining = self.strips.len();
        let mut pos = self.sphere.pos;
        for (i, step) in self.steps.iter().enumerate() {
            if step.days_represented == 0 {
                return Err(invalid(format!("steps[{i}].days_represented"), "must be >= 1"));
            }
            if !step.sphere_move.iter().all(|v| v.is_finite()) {
                return Err(invalid(format!("steps[{i}].sphere_move"), "must be finite"));
            }
            if step.strips_removed > remaining {
                return Err(invalid(
                    format!("steps[{i}].strips_removed"),
                    format!("removes {} strips but only {remaining} remain", step.strips_removed),
                ));
            }
            remaining -= step.strips_removed;
            pos = pos.translate(step.sphere_move[0], step.sphere_move[1]);
            if !self.geometry.contains(pos) {
                return Err(invalid(
                    format!("steps[{i}].sphere_move"),
                    format!("sphere leaves the platform at ({}, {})", pos.x, pos.y),
                ));
            }
        }
        Ok(())
    }
}

/// On-disk scenario document. Consecutive identical steps collapse into one
/// entry with a `repeat` count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioDoc {
    name: String,
    geometry: PlatformGeometry,
    hive_body: MassItem,
    sphere: MassItem,
    strips_total_g: f64,
    strips: Vec<Strip>,
    steps: Vec<StepRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepRun {
    #[serde(default = "one")]
    repeat: usize,
    sphere_move: [f64; 2],
    strips_removed: usize,
    days_represented: u64,
}

fn one() -> usize {
    1
}

/// Parses and validates a scenario document (JSON).
pub fn load_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let doc: ScenarioDoc = serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    let mut steps = Vec::new();
    for (i, run) in doc.steps.iter().enumerate() {
        if run.repeat == 0 {
            return Err(invalid(format!("steps[{i}].repeat"), "must be >= 1"));
        }
        let step = ScenarioStep {
            sphere_move: run.sphere_move,
            strips_removed: run.strips_removed,
            days_represented: run.days_represented,
        };
        steps.extend(std::iter::repeat_n(step, run.repeat));
    }
    let scenario = Scenario {
        name: doc.name,
        geometry: doc.geometry,
        hive_body: doc.hive_body,
        sphere: doc.sphere,
        strips_total_g: doc.strips_total_g,
        strips: doc.strips,
        steps,
    };
    scenario.validate()?;
    Ok(scenario)
}

/// Pretty-printed JSON document for `scenario`.
pub fn serialize_scenario(scenario: &Scenario) -> String {
    let mut runs: Vec<StepRun> = Vec::new();
    for step in &scenario.steps {
        match runs.last_mut() {
            Some(run)
                if run.sphere_move == step.sphere_move
                    && run.strips_removed == step.strips_removed
                    && run.days_represented == step.days_represented =>
            {
                run.repeat += 1
            }
            _ => runs.push(StepRun {
                repeat: 1,
                sphere_move: step.sphere_move,
                strips_removed: step.strips_removed,
                days_represented: step.days_represented,
            }),
        }
    }
    let doc = ScenarioDoc {
        name: scenario.name.clone(),
        geometry: scenario.geometry,
        hive_body: scenario.hive_body.clone(),
        sphere: scenario.sphere.clone(),
        strips_total_g: scenario.strips_total_g,
        strips: scenario.strips.clone(),
        steps: runs,
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("scenario serializes");
    s.push('\n');
    s
}

/// Column centres of the ten frames, spanning the platform along x.
fn frame_columns(geometry: &PlatformGeometry) -> Vec<f64> {
    let pitch = geometry.n() / 10.0;
    (0..10).map(|k| pitch * (k as f64 + 0.5)).collect()
}

/// The built-in winter experiment.
///
/// Phase 1, 70 single-day steps: the cluster only rises (no planar motion)
/// and eats one small strip a day. Phase 2, 25 two-day steps: 2 mm toward
/// the back wall and three strips each. Phase 3, 50 single-day steps: 1 mm
/// and two strips each. 145 steps, 170 days, all 245 small strips.
pub fn builtin_winter() -> Scenario {
    let geometry = PlatformGeometry::default();
    let columns = frame_columns(&geometry);
    let center = geometry.center();
    let mut strips = Vec::new();

    // Small strips sit in frames 3 to 5, which the cluster crosses.
    let small_columns = &columns[2..5];
    let slots: Vec<f64> = (0..11).map(|j| 25.0 + SMALL_STRIP_LEN_MM * j as f64).collect();
    let positions: Vec<Point> = small_columns
        .iter()
        .flat_map(|&x| slots.iter().map(move |&y| Point::new(x, y)))
        .collect();
    for i in 0..SMALL_STRIP_COUNT {
        let pos = positions[i % positions.len()];
        strips.push(Strip {
            item: MassItem::new(format!("strip-s{i:03}"), SMALL_STRIP_G, pos),
            length_mm: SMALL_STRIP_LEN_MM,
        });
    }

    // The rest of the honey is split pro rata by length between six long and
    // five medium strips per frame.
    let (long_per_frame, medium_per_frame) = (6usize, 5usize);
    let remaining_g = STRIPS_TOTAL_G - SMALL_STRIP_COUNT as f64 * SMALL_STRIP_G;
    let total_len = columns.len() as f64
        * (long_per_frame as f64 * LONG_STRIP_LEN_MM + medium_per_frame as f64 * MEDIUM_STRIP_LEN_MM);
    let g_per_mm = remaining_g / total_len;
    let mut large_ids = 0usize;
    for &x in &columns {
        for _ in 0..long_per_frame {
            strips.push(Strip {
                item: MassItem::new(format!("strip-l{large_ids:03}"), LONG_STRIP_LEN_MM * g_per_mm, Point::new(x, center.y)),
                length_mm: LONG_STRIP_LEN_MM,
            });
            large_ids += 1;
        }
        for j in 0..medium_per_frame {
            let y = if j % 2 == 0 { center.y - 92.5 } else { center.y + 92.5 };
            strips.push(Strip {
                item: MassItem::new(format!("strip-m{large_ids:03}"), MEDIUM_STRIP_LEN_MM * g_per_mm, Point::new(x, y)),
                length_mm: MEDIUM_STRIP_LEN_MM,
            });
            large_ids += 1;
        }
    }
    let strips_total_g = STRIPS_TOTAL_G;
    debug_assert!((strips.iter().map(|s| s.item.mass_g).sum::<f64>() - STRIPS_TOTAL_G).abs() < MASS_TOLERANCE_G);

    let phase = |n: usize, dx: f64, removed: usize, days: u64| {
        std::iter::repeat_n(
            ScenarioStep {
                sphere_move: [dx, 0.0],
                strips_removed: removed,
                days_represented: days,
            },
            n,
        )
    };
    let steps = phase(70, 0.0, 1, 1)
        .chain(phase(25, 2.0, 3, 2))
        .chain(phase(50, 1.0, 2, 1))
        .collect();

    Scenario {
        name: "builtin-winter".into(),
        geometry,
        hive_body: MassItem::new("hive-body", HIVE_BODY_G, center),
        sphere: MassItem::new("cluster", CLUSTER_MASS_G, Point::new(columns[2], center.y)),
        strips_total_g,
        strips,
        steps,
    }
}
