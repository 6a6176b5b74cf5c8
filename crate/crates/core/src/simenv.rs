//! Kinematic tabletop world: blocks on a table, a pick-and-place action with
//! lateral offsets, and straight-down settling.
//!
//! Units are centimetres. Positions are block centres. A block rests on the
//! highest top face among the blocks whose x-y footprint overlaps its own,
//! or on the table.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Tag stored with every generated dataset.
pub const SIMULATOR_VERSION: &str = "kinematic-stack/1";

pub const SHORT_LENGTH: f64 = 5.0;
pub const LONG_LENGTH: f64 = 20.0;
pub const BLOCK_WIDTH: f64 = 5.0;
pub const BLOCK_HEIGHT: f64 = 5.0;
/// Base height of a carried block above the table.
pub const CARRY_CLEARANCE: f64 = 20.0;
pub const SPAWN_HALF_EXTENT: f64 = 25.0;
pub const MIN_SEPARATION: f64 = 15.0;
pub const MAX_SPAWN_ATTEMPTS: usize = 10_000;
/// Lateral grasp and release offsets.
pub const OFFSETS: [f64; 3] = [-7.5, 0.0, 7.5];

const TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Short,
    Long,
}

impl BlockKind {
    pub fn length_x(self) -> f64 {
        match self {
            BlockKind::Short => SHORT_LENGTH,
            BlockKind::Long => LONG_LENGTH,
        }
    }

    pub fn width_y(self) -> f64 {
        BLOCK_WIDTH
    }

    pub fn height_z(self) -> f64 {
        BLOCK_HEIGHT
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::Short => "short",
            BlockKind::Long => "long",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub kind: BlockKind,
    pub pos: [f64; 3],
}

impl Block {
    pub fn new(kind: BlockKind, pos: [f64; 3]) -> Self {
        Self { kind, pos }
    }

    pub fn half_x(&self) -> f64 {
        self.kind.length_x() / 2.0
    }

    pub fn half_y(&self) -> f64 {
        self.kind.width_y() / 2.0
    }

    pub fn half_z(&self) -> f64 {
        self.kind.height_z() / 2.0
    }

    pub fn base(&self) -> f64 {
        self.pos[2] - self.half_z()
    }

    pub fn top(&self) -> f64 {
        self.pos[2] + self.half_z()
    }

    /// Interior overlap of the two x-y footprints (touching edges do not count).
    pub fn footprint_overlaps(&self, other: &Block) -> bool {
        (self.pos[0] - other.pos[0]).abs() < self.half_x() + other.half_x() - TOL
            && (self.pos[1] - other.pos[1]).abs() < self.half_y() + other.half_y() - TOL
    }

    /// Closed containment of a point in the x-y footprint.
    pub fn footprint_contains(&self, x: f64, y: f64) -> bool {
        (x - self.pos[0]).abs() <= self.half_x() + TOL
            && (y - self.pos[1]).abs() <= self.half_y() + TOL
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub blocks: Vec<Block>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionSpec {
    pub grasp_index: usize,
    pub grasp_offset: f64,
    pub target_index: usize,
    pub release_offset: f64,
}

impl ActionSpec {
    pub fn grasp_offset_slot(&self) -> Option<usize> {
        offset_slot(self.grasp_offset)
    }

    pub fn release_offset_slot(&self) -> Option<usize> {
        offset_slot(self.release_offset)
    }

    /// Grasp one-hot followed by release one-hot, in [`OFFSETS`] order.
    pub fn one_hot(&self) -> Result<[f64; 6], SimError> {
        let g = self.grasp_offset_slot().ok_or(SimError::InvalidAction(*self))?;
        let r = self.release_offset_slot().ok_or(SimError::InvalidAction(*self))?;
        let mut out = [0.0; 6];
        out[g] = 1.0;
        out[3 + r] = 1.0;
        Ok(out)
    }

    pub fn validate(&self, n: usize) -> Result<(), SimError> {
        let ok = self.grasp_index < n
            && self.target_index < n
            && self.grasp_index != self.target_index
            && self.grasp_offset_slot().is_some()
            && self.release_offset_slot().is_some();
        if ok {
            Ok(())
        } else {
            Err(SimError::InvalidAction(*self))
        }
    }

    /// Uniformly random valid action for a scene of `n >= 2` blocks.
    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let grasp_index = rng.random_range(0..n);
        let mut target_index = rng.random_range(0..n - 1);
        if target_index >= grasp_index {
            target_index += 1;
        }
        Self {
            grasp_index,
            grasp_offset: OFFSETS[rng.random_range(0..3)],
            target_index,
            release_offset: OFFSETS[rng.random_range(0..3)],
        }
    }
}

fn offset_slot(v: f64) -> Option<usize> {
    OFFSETS.iter().position(|&o| o == v)
}

/// Per-object `[pick dx, dy, dz, release dx, dy, dz]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectRecord {
    pub per_object: Vec<[f64; 6]>,
}

impl EffectRecord {
    pub fn zeros(n: usize) -> Self {
        Self {
            per_object: vec![[0.0; 6]; n],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.per_object.iter().flatten().all(|&v| v == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("object count {0} outside 2..=4")]
    ObjectCount(usize),
    #[error("could not place {0} blocks after {MAX_SPAWN_ATTEMPTS} attempts")]
    Generation(usize),
    #[error("invalid action {0:?}")]
    InvalidAction(ActionSpec),
    #[error("contract violation: {0}")]
    Contract(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    BelowTable(usize),
    Unsupported(usize),
    Interpenetration(usize, usize),
}

/// Spawns `n` blocks on the table. Kinds are uniform; centres are uniform in
/// the spawn square subject to the minimum separation and to non-overlapping
/// footprints.
pub fn spawn_scene<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<WorldState, SimError> {
    if !(2..=4).contains(&n) {
        return Err(SimError::ObjectCount(n));
    }
    let kinds: Vec<BlockKind> = (0..n)
        .map(|_| {
            if rng.random_bool(0.5) {
                BlockKind::Short
            } else {
                BlockKind::Long
            }
        })
        .collect();
    let mut blocks: Vec<Block> = Vec::with_capacity(n);
    let mut attempts = 0;
    while blocks.len() < n {
        if attempts >= MAX_SPAWN_ATTEMPTS {
            return Err(SimError::Generation(n));
        }
        attempts += 1;
        let kind = kinds[blocks.len()];
        let x = rng.random_range(-SPAWN_HALF_EXTENT..=SPAWN_HALF_EXTENT);
        let y = rng.random_range(-SPAWN_HALF_EXTENT..=SPAWN_HALF_EXTENT);
        let cand = Block::new(kind, [x, y, kind.height_z() / 2.0]);
        let clear = blocks.iter().all(|b| {
            let d = (b.pos[0] - x).hypot(b.pos[1] - y);
            d >= MIN_SEPARATION && !b.footprint_overlaps(&cand)
        });
        if clear {
            blocks.push(cand);
        }
    }
    Ok(WorldState { blocks })
}

pub fn grasp_success(state: &WorldState, grasp_index: usize, grasp_offset: f64) -> bool {
    let Some(g) = state.blocks.get(grasp_index) else {
        return false;
    };
    if grasp_offset.abs() > g.half_x() + TOL {
        return false;
    }
    let (px, py) = (g.pos[0] + grasp_offset, g.pos[1]);
    !state
        .blocks
        .iter()
        .enumerate()
        .any(|(i, b)| i != grasp_index && b.pos[2] > g.pos[2] + TOL && b.footprint_contains(px, py))
}

/// Drops every block straight down onto the highest overlapping top face or
/// the table, processing blocks from the lowest base upwards.
pub fn settle(state: &WorldState) -> WorldState {
    settle_holding(state, None)
}

/// [`settle`] with one block held in the gripper (left untouched and ignored
/// as a support).
pub fn settle_holding(state: &WorldState, held: Option<usize>) -> WorldState {
    let mut order: Vec<usize> = (0..state.blocks.len())
        .filter(|&i| Some(i) != held)
        .collect();
    order.sort_by(|&a, &b| {
        state.blocks[a]
            .base()
            .total_cmp(&state.blocks[b].base())
            .then(a.cmp(&b))
    });
    let mut out = state.clone();
    let mut placed: Vec<usize> = Vec::with_capacity(order.len());
    for &i in &order {
        let rest = placed
            .iter()
            .filter(|&&j| out.blocks[j].footprint_overlaps(&out.blocks[i]))
            .map(|&j| out.blocks[j].top())
            .fold(0.0, f64::max);
        let b = &mut out.blocks[i];
        b.pos[2] = rest + b.half_z();
        placed.push(i);
    }
    out
}

pub fn is_settled(state: &WorldState) -> bool {
    settle(state) == *state
}

/// Checks the resting invariants: nothing below the table, every block on
/// the table or on an overlapping top face, and no two overlapping blocks
/// sharing height.
pub fn check_invariants(state: &WorldState) -> Result<(), Violation> {
    let blocks = &state.blocks;
    for (i, b) in blocks.iter().enumerate() {
        if b.base() < -TOL {
            return Err(Violation::BelowTable(i));
        }
        let supported = b.base().abs() <= TOL
            || blocks.iter().enumerate().any(|(j, o)| {
                j != i && o.footprint_overlaps(b) && (o.top() - b.base()).abs() <= TOL
            });
        if !supported {
            return Err(Violation::Unsupported(i));
        }
        for (j, o) in blocks.iter().enumerate().skip(i + 1) {
            if b.footprint_overlaps(o) && b.base() < o.top() - TOL && o.base() < b.top() - TOL {
                return Err(Violation::Interpenetration(i, j));
            }
        }
    }
    Ok(())
}

pub fn carry_height(kind: BlockKind) -> f64 {
    CARRY_CLEARANCE + kind.height_z() / 2.0
}

/// Runs one pick-and-place action on a settled state.
pub fn execute(state: &WorldState, action: &ActionSpec) -> Result<(WorldState, EffectRecord), SimError> {
    let n = state.blocks.len();
    action.validate(n)?;
    if !is_settled(state) {
        return Err(SimError::Contract("execute requires a settled state".into()));
    }
    if !grasp_success(state, action.grasp_index, action.grasp_offset) {
        return Ok((state.clone(), EffectRecord::zeros(n)));
    }
    let g = action.grasp_index;
    let carry_z = carry_height(state.blocks[g].kind);

    let mut lifted = state.clone();
    lifted.blocks[g].pos[2] = carry_z;
    let lifted = settle_holding(&lifted, Some(g));

    let target = lifted.blocks[action.target_index].pos;
    let placement = [target[0] + action.release_offset, target[1], carry_z];
    let mut released = lifted.clone();
    released.blocks[g].pos = placement;
    let released = settle(&released);

    let mut effects = EffectRecord::zeros(n);
    for (i, e) in effects.per_object.iter_mut().enumerate() {
        for d in 0..3 {
            e[d] = lifted.blocks[i].pos[d] - state.blocks[i].pos[d];
        }
    }
    for d in 0..3 {
        effects.per_object[g][3 + d] = released.blocks[g].pos[d] - placement[d];
    }
    Ok((released, effects))
}

/// Per-object rows `[is_short, is_long, dx, dy, dz, is_target]` relative to
/// the block about to be grasped.
pub fn relative_features(state: &WorldState, action: &ActionSpec) -> Vec<[f64; 6]> {
    let origin = state.blocks[action.grasp_index].pos;
    state
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let (short, long) = match b.kind {
                BlockKind::Short => (1.0, 0.0),
                BlockKind::Long => (0.0, 1.0),
            };
            [
                short,
                long,
                b.pos[0] - origin[0],
                b.pos[1] - origin[1],
                b.pos[2] - origin[2],
                if i == action.target_index { 1.0 } else { 0.0 },
            ]
        })
        .collect()
}

/// One block per line: `kind x y z`.
pub fn dump_scene(state: &WorldState) -> String {
    let mut out = String::new();
    for b in &state.blocks {
        let _ = writeln!(out, "{} {} {} {}", b.kind.as_str(), b.pos[0], b.pos[1], b.pos[2]);
    }
    out
}
