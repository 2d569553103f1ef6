//! Parameter storage and the scoring pipeline
//! `h' = T_s(s_h) ⊙ T_v(v_h)`, `f(h, r, t) = ⟨h', s_t ⊙ v_t⟩`.
//!
//! Every element is computed in ℍ internally; real and complex variants
//! simply leave the upper coordinates at zero, which the subring structure
//! ℝ ⊂ ℂ ⊂ ℍ preserves under multiplication.

use std::f64::consts::PI;
use std::fmt;
use std::io::{self, Read, Write};
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::algebra::{
    self, apply_rotation, apply_scaling, exp_map, exp_map_vjp, field_norm, inner_product, phase,
    phase_vjp, AlgebraError, ElementKind, ModuleElement, Quaternion,
};

/// Entities per parallel work unit. Fixed so that reductions happen in the
/// same order regardless of the thread count.
pub(crate) const ENTITY_CHUNK: usize = 512;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MKGE";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
    #[error("{what} id {id} out of range (size {len})")]
    IndexOutOfRange { what: &'static str, id: usize, len: usize },
    #[error("tuple lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    VersionUnsupported(u32),
    #[error("unknown variant tag {0}")]
    UnknownVariant(u32),
    #[error("checkpoint truncated or malformed: {0}")]
    Truncated(String),
    #[error("non-finite parameter in {0} table")]
    NonFinite(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalingGroup {
    /// Nonzero reals acting by multiplication.
    GL1,
    /// Trivial group: scaling is the identity.
    FixedPoint,
    /// Unit quaternions acting by right multiplication.
    UnitQuaternion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RotationGroup {
    /// Trivial group: rotation is the identity.
    FixedPoint,
    /// Unit complex numbers `e^{iθ}`.
    U1,
    /// Unit quaternions acting by right multiplication.
    UnitQuaternion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    /// `Σᵢ ⟨h'ᵢ, tᵢ⟩`.
    Cosine,
    /// `-Σᵢ sqrt(N(h'ᵢ - tᵢ))`.
    Distance,
}

/// Scalar group S, vector group V, scaling group T_S, rotation group T_V.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupSpec {
    pub scalar: ElementKind,
    pub vector: ElementKind,
    pub scaling: ScalingGroup,
    pub rotation: RotationGroup,
    pub score: ScoreKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    ModuleRC,
    ModuleRH,
    ModuleHH,
    DistMult,
    RotatE,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::ModuleRC,
        Variant::ModuleRH,
        Variant::ModuleHH,
        Variant::DistMult,
        Variant::RotatE,
    ];

    pub fn groups(self) -> GroupSpec {
        use ElementKind::*;
        let (scalar, vector, scaling, rotation, score) = match self {
            Variant::ModuleRC => (Real, Complex, ScalingGroup::GL1, RotationGroup::U1, ScoreKind::Cosine),
            Variant::ModuleRH => (
                Real,
                Quaternion,
                ScalingGroup::GL1,
                RotationGroup::UnitQuaternion,
                ScoreKind::Cosine,
            ),
            Variant::ModuleHH => (
                Quaternion,
                Quaternion,
                ScalingGroup::UnitQuaternion,
                RotationGroup::UnitQuaternion,
                ScoreKind::Cosine,
            ),
            Variant::DistMult => (Real, Real, ScalingGroup::GL1, RotationGroup::FixedPoint, ScoreKind::Cosine),
            Variant::RotatE => (
                Real,
                Complex,
                ScalingGroup::FixedPoint,
                RotationGroup::U1,
                ScoreKind::Distance,
            ),
        };
        GroupSpec {
            scalar,
            vector,
            scaling,
            rotation,
            score,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::ModuleRC => "module_rc",
            Variant::ModuleRH => "module_rh",
            Variant::ModuleHH => "module_hh",
            Variant::DistMult => "distmult",
            Variant::RotatE => "rotate",
        }
    }

    pub fn tag(self) -> u32 {
        match self {
            Variant::ModuleRC => 0,
            Variant::ModuleRH => 1,
            Variant::ModuleHH => 2,
            Variant::DistMult => 3,
            Variant::RotatE => 4,
        }
    }

    pub fn from_tag(tag: u32) -> Result<Self, ModelError> {
        Variant::ALL
            .into_iter()
            .find(|v| v.tag() == tag)
            .ok_or(ModelError::UnknownVariant(tag))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rc" | "module_rc" => Ok(Variant::ModuleRC),
            "rh" | "module_rh" => Ok(Variant::ModuleRH),
            "hh" | "module_hh" => Ok(Variant::ModuleHH),
            "distmult" => Ok(Variant::DistMult),
            "rotate" => Ok(Variant::RotatE),
            _ => Err(format!("unknown model '{s}' (expected rc|rh|hh|distmult|rotate)")),
        }
    }
}

/// Which parts of the embedding are trained. Frozen parts are held at the
/// group identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum AblationMask {
    /// Moduli only: entity vectors and relation rotations are the identity.
    ScalarOnly,
    /// Orientation only: entity scalars and relation scalings are 1.
    VectorOnly,
    #[default]
    Both,
}

impl AblationMask {
    pub const ALL: [AblationMask; 3] = [AblationMask::ScalarOnly, AblationMask::VectorOnly, AblationMask::Both];

    pub fn trains(self, part: Part) -> bool {
        !matches!(
            (self, part),
            (AblationMask::ScalarOnly, Part::Vector) | (AblationMask::VectorOnly, Part::Scalar)
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationMask::ScalarOnly => "scalar",
            AblationMask::VectorOnly => "vector",
            AblationMask::Both => "both",
        }
    }
}

impl fmt::Display for AblationMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMask {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "scalar" | "scalar_only" => Ok(AblationMask::ScalarOnly),
            "vector" | "vector_only" => Ok(AblationMask::VectorOnly),
            "both" => Ok(AblationMask::Both),
            _ => Err(format!("unknown ablation '{s}' (expected scalar|vector|both)")),
        }
    }
}

/// The modulus half (entity scalar, relation scaling) or orientation half
/// (entity vector, relation rotation) of the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Scalar,
    Vector,
}

/// Per-slot parameter counts. Entity rows are `[scalar | vector]`, relation
/// rows `[scaling | rotation]`, each block slot-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub k: usize,
    pub scalar: usize,
    pub vector: usize,
    pub scaling: usize,
    pub rotation: usize,
    /// Real coordinates per slot of a combined embedding.
    pub width: usize,
}

impl Layout {
    pub fn new(variant: Variant, k: usize) -> Self {
        let g = variant.groups();
        let vector = match g.vector {
            ElementKind::Real => 0,
            ElementKind::Complex => 1,
            ElementKind::Quaternion => 3,
        };
        let scaling = match g.scaling {
            ScalingGroup::GL1 => 1,
            ScalingGroup::FixedPoint => 0,
            ScalingGroup::UnitQuaternion => 3,
        };
        let rotation = match g.rotation {
            RotationGroup::FixedPoint => 0,
            RotationGroup::U1 => 1,
            RotationGroup::UnitQuaternion => 3,
        };
        Layout {
            k,
            scalar: g.scalar.width(),
            vector,
            scaling,
            rotation,
            width: g.vector.width(),
        }
    }

    pub fn entity_len(&self) -> usize {
        self.k * (self.scalar + self.vector)
    }

    pub fn relation_len(&self) -> usize {
        self.k * (self.scaling + self.rotation)
    }

    /// Length of a flattened combined embedding.
    pub fn dim(&self) -> usize {
        self.k * self.width
    }

    pub fn entity_part(&self, part: Part) -> std::ops::Range<usize> {
        let split = self.k * self.scalar;
        match part {
            Part::Scalar => 0..split,
            Part::Vector => split..self.entity_len(),
        }
    }

    pub fn relation_part(&self, part: Part) -> std::ops::Range<usize> {
        let split = self.k * self.scaling;
        match part {
            Part::Scalar => 0..split,
            Part::Vector => split..self.relation_len(),
        }
    }
}

/// Materialized scalar and vector tuples of one entity.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityEmbedding {
    pub scalar: Vec<ModuleElement>,
    pub vector: Vec<ModuleElement>,
}

/// Materialized scaling and rotation group elements of one relation.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationEmbedding {
    pub scaling: Vec<ModuleElement>,
    pub rotation: Vec<ModuleElement>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    variant: Variant,
    layout: Layout,
    num_entities: usize,
    num_relations: usize,
    pub(crate) entities: Vec<f64>,
    pub(crate) relations: Vec<f64>,
}

fn omega(p: &[f64]) -> [f64; 3] {
    [p[0], p[1], p[2]]
}

fn add3(out: &mut [f64], g: [f64; 3]) {
    for c in 0..3 {
        out[c] += g[c];
    }
}

impl ParameterStore {
    /// Random initialization. Scalar coordinates (and GL(1) scalings) are
    /// uniform in `±0.5/√k`; angles and rotation vectors are uniform in
    /// `±π`. Parts frozen by `mask` are set to the identity. Each block is
    /// drawn from its own ChaCha stream so that variants sharing a block
    /// shape also share its values for the same seed.
    pub fn init(
        variant: Variant,
        k: usize,
        num_entities: usize,
        num_relations: usize,
        mask: AblationMask,
        seed: u64,
    ) -> Self {
        assert!(k >= 1, "embedding multiplier must be positive");
        let layout = Layout::new(variant, k);
        let mut store = ParameterStore::identity(variant, k, num_entities, num_relations);
        let bound = 0.5 / (k as f64).sqrt();
        let stream = |n: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(n);
            rng
        };
        let (el, rl) = (layout.entity_len(), layout.relation_len());
        let scaling_bound = match variant.groups().scaling {
            ScalingGroup::UnitQuaternion => PI,
            _ => bound,
        };
        let blocks: [(u64, Part, bool, f64); 4] = [
            (0, Part::Scalar, true, bound),
            (1, Part::Vector, true, PI),
            (2, Part::Scalar, false, scaling_bound),
            (3, Part::Vector, false, PI),
        ];
        for (id, part, is_entity, b) in blocks {
            if !mask.trains(part) {
                continue;
            }
            let mut rng = stream(id);
            let (table, row_len, range, rows) = if is_entity {
                (&mut store.entities, el, layout.entity_part(part), num_entities)
            } else {
                (&mut store.relations, rl, layout.relation_part(part), num_relations)
            };
            for row in 0..rows {
                for x in &mut table[row * row_len + range.start..row * row_len + range.end] {
                    *x = rng.random_range(-b..b);
                }
            }
        }
        store
    }

    /// A store whose every element is the group identity.
    pub fn identity(variant: Variant, k: usize, num_entities: usize, num_relations: usize) -> Self {
        let layout = Layout::new(variant, k);
        let g = variant.groups();
        let mut entities = vec![0.0; num_entities * layout.entity_len()];
        let mut relations = vec![0.0; num_relations * layout.relation_len()];
        for row in entities.chunks_mut(layout.entity_len().max(1)) {
            for slot in 0..k {
                row[slot * layout.scalar] = 1.0;
            }
        }
        if g.scaling == ScalingGroup::GL1 {
            for row in relations.chunks_mut(layout.relation_len().max(1)) {
                row[..k].fill(1.0);
            }
        }
        ParameterStore {
            variant,
            layout,
            num_entities,
            num_relations,
            entities,
            relations,
        }
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn k(&self) -> usize {
        self.layout.k
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn entity_params(&self, e: usize) -> &[f64] {
        let n = self.layout.entity_len();
        &self.entities[e * n..(e + 1) * n]
    }

    pub fn relation_params(&self, r: usize) -> &[f64] {
        let n = self.layout.relation_len();
        &self.relations[r * n..(r + 1) * n]
    }

    pub fn entity_params_mut(&mut self, e: usize) -> &mut [f64] {
        let n = self.layout.entity_len();
        &mut self.entities[e * n..(e + 1) * n]
    }

    pub fn relation_params_mut(&mut self, r: usize) -> &mut [f64] {
        let n = self.layout.relation_len();
        &mut self.relations[r * n..(r + 1) * n]
    }

    pub fn entity_table(&self) -> &[f64] {
        &self.entities
    }

    pub fn relation_table(&self) -> &[f64] {
        &self.relations
    }

    /// Number of trainable reals under `mask`.
    pub fn free_parameter_count(&self, mask: AblationMask) -> usize {
        let mut n = 0;
        for part in [Part::Scalar, Part::Vector] {
            if mask.trains(part) {
                n += self.num_entities * self.layout.entity_part(part).len();
                n += self.num_relations * self.layout.relation_part(part).len();
            }
        }
        n
    }

    pub fn all_finite(&self) -> bool {
        self.entities.iter().chain(&self.relations).all(|x| x.is_finite())
    }

    pub(crate) fn check_entity(&self, e: usize) -> Result<(), ModelError> {
        if e < self.num_entities {
            Ok(())
        } else {
            Err(ModelError::IndexOutOfRange {
                what: "entity",
                id: e,
                len: self.num_entities,
            })
        }
    }

    pub(crate) fn check_relation(&self, r: usize) -> Result<(), ModelError> {
        if r < self.num_relations {
            Ok(())
        } else {
            Err(ModelError::IndexOutOfRange {
                what: "relation",
                id: r,
                len: self.num_relations,
            })
        }
    }

    /// Writes scalar and vector elements of entity `e` into the two buffers
    /// (length k each).
    pub(crate) fn entity_parts(&self, e: usize, mask: AblationMask, s: &mut [Quaternion], v: &mut [Quaternion]) {
        let l = self.layout;
        let row = self.entity_params(e);
        let (sb, vb) = row.split_at(l.k * l.scalar);
        for i in 0..l.k {
            s[i] = if !mask.trains(Part::Scalar) {
                Quaternion::ONE
            } else if l.scalar == 1 {
                Quaternion::from_real(sb[i])
            } else {
                Quaternion::from_array([sb[4 * i], sb[4 * i + 1], sb[4 * i + 2], sb[4 * i + 3]])
            };
            v[i] = if !mask.trains(Part::Vector) {
                Quaternion::ONE
            } else {
                match l.vector {
                    0 => Quaternion::ONE,
                    1 => phase(vb[i]),
                    _ => exp_map(omega(&vb[3 * i..])).quaternion(),
                }
            };
        }
    }

    pub(crate) fn relation_parts(&self, r: usize, mask: AblationMask, gs: &mut [Quaternion], gv: &mut [Quaternion]) {
        let l = self.layout;
        let row = self.relation_params(r);
        let (sb, vb) = row.split_at(l.k * l.scaling);
        for i in 0..l.k {
            gs[i] = if !mask.trains(Part::Scalar) {
                Quaternion::ONE
            } else {
                match l.scaling {
                    0 => Quaternion::ONE,
                    1 => Quaternion::from_real(sb[i]),
                    _ => exp_map(omega(&sb[3 * i..])).quaternion(),
                }
            };
            gv[i] = if !mask.trains(Part::Vector) {
                Quaternion::ONE
            } else {
                match l.rotation {
                    0 => Quaternion::ONE,
                    1 => phase(vb[i]),
                    _ => exp_map(omega(&vb[3 * i..])).quaternion(),
                }
            };
        }
    }

    /// Chains gradients on materialized entity elements down to the row's
    /// free parameters, accumulating into `grad`. Frozen parts are skipped.
    pub(crate) fn entity_backward(
        &self,
        e: usize,
        mask: AblationMask,
        ds: &[Quaternion],
        dv: &[Quaternion],
        grad: &mut [f64],
    ) {
        let l = self.layout;
        let row = self.entity_params(e);
        let split = l.k * l.scalar;
        let (gs, gv) = grad.split_at_mut(split);
        if mask.trains(Part::Scalar) {
            for i in 0..l.k {
                if l.scalar == 1 {
                    gs[i] += ds[i].a;
                } else {
                    for (c, x) in ds[i].to_array().into_iter().enumerate() {
                        gs[4 * i + c] += x;
                    }
                }
            }
        }
        if mask.trains(Part::Vector) {
            let vb = &row[split..];
            for i in 0..l.k {
                match l.vector {
                    0 => {}
                    1 => gv[i] += phase_vjp(vb[i], dv[i]),
                    _ => add3(&mut gv[3 * i..], exp_map_vjp(omega(&vb[3 * i..]), dv[i])),
                }
            }
        }
    }

    pub(crate) fn relation_backward(
        &self,
        r: usize,
        mask: AblationMask,
        dgs: &[Quaternion],
        dgv: &[Quaternion],
        grad: &mut [f64],
    ) {
        let l = self.layout;
        let row = self.relation_params(r);
        let split = l.k * l.scaling;
        let (sb, vb) = row.split_at(split);
        let (gs, gv) = grad.split_at_mut(split);
        if mask.trains(Part::Scalar) {
            for i in 0..l.k {
                match l.scaling {
                    0 => {}
                    1 => gs[i] += dgs[i].a,
                    _ => add3(&mut gs[3 * i..], exp_map_vjp(omega(&sb[3 * i..]), dgs[i])),
                }
            }
        }
        if mask.trains(Part::Vector) {
            for i in 0..l.k {
                match l.rotation {
                    0 => {}
                    1 => gv[i] += phase_vjp(vb[i], dgv[i]),
                    _ => add3(&mut gv[3 * i..], exp_map_vjp(omega(&vb[3 * i..]), dgv[i])),
                }
            }
        }
    }

    pub fn entity_embedding(&self, e: usize, mask: AblationMask) -> Result<EntityEmbedding, ModelError> {
        self.check_entity(e)?;
        let g = self.variant.groups();
        let k = self.k();
        let (mut s, mut v) = (vec![Quaternion::ZERO; k], vec![Quaternion::ZERO; k]);
        self.entity_parts(e, mask, &mut s, &mut v);
        Ok(EntityEmbedding {
            scalar: s.iter().map(|&q| ModuleElement::from_quaternion(g.scalar, q)).collect(),
            vector: v.iter().map(|&q| ModuleElement::from_quaternion(g.vector, q)).collect(),
        })
    }

    pub fn relation_embedding(&self, r: usize, mask: AblationMask) -> Result<RelationEmbedding, ModelError> {
        self.check_relation(r)?;
        let g = self.variant.groups();
        let k = self.k();
        let (mut gs, mut gv) = (vec![Quaternion::ZERO; k], vec![Quaternion::ZERO; k]);
        self.relation_parts(r, mask, &mut gs, &mut gv);
        let scaling_kind = match g.scaling {
            ScalingGroup::UnitQuaternion => ElementKind::Quaternion,
            _ => ElementKind::Real,
        };
        Ok(RelationEmbedding {
            scaling: gs.iter().map(|&q| ModuleElement::from_quaternion(scaling_kind, q)).collect(),
            rotation: gv.iter().map(|&q| ModuleElement::from_quaternion(g.vector, q)).collect(),
        })
    }

    /// Combined embeddings `s_e ⊙ v_e` of every entity, one row each.
    pub fn combined_entities(&self, mask: AblationMask) -> Array2<f64> {
        let l = self.layout;
        let mut out = Array2::<f64>::zeros((self.num_entities, l.dim()));
        out.axis_chunks_iter_mut(Axis(0), ENTITY_CHUNK)
            .into_par_iter()
            .enumerate()
            .for_each(|(c, mut chunk)| {
                let (mut s, mut v) = (vec![Quaternion::ZERO; l.k], vec![Quaternion::ZERO; l.k]);
                for (j, mut row) in chunk.axis_iter_mut(Axis(0)).enumerate() {
                    self.entity_parts(c * ENTITY_CHUNK + j, mask, &mut s, &mut v);
                    let row = row.as_slice_mut().expect("standard layout");
                    for i in 0..l.k {
                        let q = (s[i] * v[i]).to_array();
                        row[i * l.width..(i + 1) * l.width].copy_from_slice(&q[..l.width]);
                    }
                }
            });
        out
    }

    /// Transformed heads `h'` for a batch of `(h, r)` queries.
    pub fn transformed_heads(&self, queries: &[(usize, usize)], mask: AblationMask) -> Result<Array2<f64>, ModelError> {
        for &(h, r) in queries {
            self.check_entity(h)?;
            self.check_relation(r)?;
        }
        let l = self.layout;
        let mut out = Array2::<f64>::zeros((queries.len(), l.dim()));
        let mut buf = HeadBuffers::new(l.k);
        for (b, &(h, r)) in queries.iter().enumerate() {
            buf.forward(self, h, r, mask);
            let mut row = out.row_mut(b);
            let row = row.as_slice_mut().expect("standard layout");
            for i in 0..l.k {
                let q = buf.out[i].to_array();
                row[i * l.width..(i + 1) * l.width].copy_from_slice(&q[..l.width]);
            }
        }
        Ok(out)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&self.variant.tag().to_le_bytes())?;
        for n in [self.k(), self.num_entities, self.num_relations] {
            w.write_all(&(n as u64).to_le_bytes())?;
        }
        write_f64s(w, &self.entities)?;
        write_f64s(w, &self.relations)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, ModelError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| ModelError::BadMagic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::BadMagic);
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::VersionUnsupported(version));
        }
        let variant = Variant::from_tag(read_u32(r)?)?;
        let k = read_u64(r)? as usize;
        let ne = read_u64(r)? as usize;
        let nr = read_u64(r)? as usize;
        if k == 0 {
            return Err(ModelError::Truncated("k = 0".into()));
        }
        let layout = Layout::new(variant, k);
        let entities = read_f64s(r, checked_len(ne, layout.entity_len())?)?;
        let relations = read_f64s(r, checked_len(nr, layout.relation_len())?)?;
        Ok(ParameterStore {
            variant,
            layout,
            num_entities: ne,
            num_relations: nr,
            entities,
            relations,
        })
    }
}

fn checked_len(rows: usize, cols: usize) -> Result<usize, ModelError> {
    rows.checked_mul(cols)
        .filter(|&n| n <= (1 << 36))
        .ok_or_else(|| ModelError::Truncated(format!("table of {rows}×{cols} values")))
}

pub(crate) fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(xs.len() * 8);
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| ModelError::Truncated(e.to_string()))?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64, ModelError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| ModelError::Truncated(e.to_string()))?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>, ModelError> {
    let mut out = Vec::with_capacity(n);
    let mut buf = [0u8; 8 * 1024];
    let mut remaining = n;
    while remaining > 0 {
        let take = remaining.min(1024);
        r.read_exact(&mut buf[..take * 8])
            .map_err(|e| ModelError::Truncated(e.to_string()))?;
        out.extend(buf[..take * 8].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())));
        remaining -= take;
    }
    Ok(out)
}

/// Scratch space for one forward/backward pass of the head transform.
pub(crate) struct HeadBuffers {
    pub s: Vec<Quaternion>,
    pub v: Vec<Quaternion>,
    pub gs: Vec<Quaternion>,
    pub gv: Vec<Quaternion>,
    pub s_t: Vec<Quaternion>,
    pub v_t: Vec<Quaternion>,
    pub out: Vec<Quaternion>,
}

impl HeadBuffers {
    pub fn new(k: usize) -> Self {
        let z = vec![Quaternion::ZERO; k];
        HeadBuffers {
            s: z.clone(),
            v: z.clone(),
            gs: z.clone(),
            gv: z.clone(),
            s_t: z.clone(),
            v_t: z.clone(),
            out: z,
        }
    }

    /// `h'ᵢ = (sᵢ ⊗ gsᵢ) ⊗ (vᵢ ⊗ gvᵢ)`.
    pub fn forward(&mut self, store: &ParameterStore, h: usize, r: usize, mask: AblationMask) {
        store.entity_parts(h, mask, &mut self.s, &mut self.v);
        store.relation_parts(r, mask, &mut self.gs, &mut self.gv);
        for i in 0..store.k() {
            self.s_t[i] = self.s[i] * self.gs[i];
            self.v_t[i] = self.v[i] * self.gv[i];
            self.out[i] = self.s_t[i] * self.v_t[i];
        }
    }

    /// Given `dL/dh'` (flattened, slot width `w`), accumulates gradients
    /// into the head's entity row and the relation row. Requires a prior
    /// [`HeadBuffers::forward`] for the same `(h, r)`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        store: &ParameterStore,
        h: usize,
        r: usize,
        mask: AblationMask,
        d_out: &[f64],
        entity_grad: &mut [f64],
        relation_grad: &mut [f64],
    ) {
        let l = store.layout();
        let mut ds = vec![Quaternion::ZERO; l.k];
        let mut dv = vec![Quaternion::ZERO; l.k];
        let mut dgs = vec![Quaternion::ZERO; l.k];
        let mut dgv = vec![Quaternion::ZERO; l.k];
        for i in 0..l.k {
            let mut g = [0.0; 4];
            g[..l.width].copy_from_slice(&d_out[i * l.width..(i + 1) * l.width]);
            let g = Quaternion::from_array(g);
            // z = p ⊗ q: dL/dp = g ⊗ q̄, dL/dq = p̄ ⊗ g.
            let d_st = g * self.v_t[i].conj();
            let d_vt = self.s_t[i].conj() * g;
            ds[i] = d_st * self.gs[i].conj();
            dgs[i] = self.s[i].conj() * d_st;
            dv[i] = d_vt * self.gv[i].conj();
            dgv[i] = self.v[i].conj() * d_vt;
        }
        store.entity_backward(h, mask, &ds, &dv, entity_grad);
        store.relation_backward(r, mask, &dgs, &dgv, relation_grad);
    }
}

/// Element-wise `sᵢ · vᵢ`.
pub fn combine(scalar: &[ModuleElement], vector: &[ModuleElement]) -> Result<Vec<ModuleElement>, ModelError> {
    if scalar.len() != vector.len() {
        return Err(ModelError::LengthMismatch(scalar.len(), vector.len()));
    }
    scalar
        .iter()
        .zip(vector)
        .map(|(s, v)| algebra::scalar_multiply(s, v).map_err(ModelError::from))
        .collect()
}

/// `h' = T_s(s_h) ⊙ T_v(v_h)` with the algebra-level checked operations.
pub fn transform_head(
    h: &EntityEmbedding,
    r: &RelationEmbedding,
    variant: Variant,
    mask: AblationMask,
) -> Result<Vec<ModuleElement>, ModelError> {
    let g = variant.groups();
    let scale = mask.trains(Part::Scalar) && g.scaling != ScalingGroup::FixedPoint;
    let rotate = mask.trains(Part::Vector) && g.rotation != RotationGroup::FixedPoint;
    if h.scalar.len() != r.scaling.len() {
        return Err(ModelError::LengthMismatch(h.scalar.len(), r.scaling.len()));
    }
    if h.vector.len() != r.rotation.len() {
        return Err(ModelError::LengthMismatch(h.vector.len(), r.rotation.len()));
    }
    let scalar = if scale {
        h.scalar
            .iter()
            .zip(&r.scaling)
            .map(|(s, g)| apply_scaling(s, g))
            .collect::<Result<Vec<_>, _>>()?
    } else {
        h.scalar.clone()
    };
    let vector = if rotate {
        h.vector
            .iter()
            .zip(&r.rotation)
            .map(|(v, g)| apply_rotation(v, g))
            .collect::<Result<Vec<_>, _>>()?
    } else {
        h.vector.clone()
    };
    combine(&scalar, &vector)
}

/// Scores a tuple pair: `Σ ⟨h'ᵢ, tᵢ⟩` or `-Σ sqrt(N(h'ᵢ - tᵢ))`.
pub fn score_tuples(head: &[ModuleElement], tail: &[ModuleElement], kind: ScoreKind) -> Result<f64, ModelError> {
    if head.len() != tail.len() {
        return Err(ModelError::LengthMismatch(head.len(), tail.len()));
    }
    let mut total = 0.0;
    for (x, y) in head.iter().zip(tail) {
        total += match kind {
            ScoreKind::Cosine => inner_product(x, y)?,
            ScoreKind::Distance => {
                if x.kind() != y.kind() {
                    return Err(AlgebraError::TagMismatch(x.kind(), y.kind()).into());
                }
                let d = ModuleElement::from_quaternion(x.kind(), x.to_quaternion() - y.to_quaternion());
                -field_norm(&d).sqrt()
            }
        };
    }
    Ok(total)
}

/// Plausibility `f_r(h, t)` of one triple; higher is better.
pub fn score(h: usize, r: usize, t: usize, store: &ParameterStore, mask: AblationMask) -> Result<f64, ModelError> {
    let he = store.entity_embedding(h, mask)?;
    let re = store.relation_embedding(r, mask)?;
    let te = store.entity_embedding(t, mask)?;
    let head = transform_head(&he, &re, store.variant(), mask)?;
    let tail = combine(&te.scalar, &te.vector)?;
    score_tuples(&head, &tail, store.variant().groups().score)
}

/// Scores of `(h, r, j)` for every entity `j`, reusing `h'`.
pub fn score_all_tails(h: usize, r: usize, store: &ParameterStore, mask: AblationMask) -> Result<Vec<f64>, ModelError> {
    let heads = store.transformed_heads(&[(h, r)], mask)?;
    let entities = store.combined_entities(mask);
    let scores = score_matrix(heads.view(), entities.view(), store.variant().groups().score, store.layout().width);
    Ok(scores.row(0).to_vec())
}

/// `heads` (B × D) against `entities` (N × D), giving B × N scores.
pub fn score_matrix(heads: ArrayView2<f64>, entities: ArrayView2<f64>, kind: ScoreKind, width: usize) -> Array2<f64> {
    let (b, n) = (heads.nrows(), entities.nrows());
    let mut out = Array2::<f64>::zeros((b, n));
    let chunks: Vec<Array2<f64>> = entities
        .axis_chunks_iter(Axis(0), ENTITY_CHUNK)
        .into_par_iter()
        .map(|ent| match kind {
            ScoreKind::Cosine => heads.dot(&ent.t()),
            ScoreKind::Distance => distance_block(heads, ent, width),
        })
        .collect();
    for (c, block) in chunks.into_iter().enumerate() {
        let start = c * ENTITY_CHUNK;
        out.slice_mut(ndarray::s![.., start..start + block.ncols()]).assign(&block);
    }
    out
}

pub(crate) fn distance_block(heads: ArrayView2<f64>, ent: ArrayView2<f64>, width: usize) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((heads.nrows(), ent.nrows()));
    for (b, h) in heads.outer_iter().enumerate() {
        for (j, e) in ent.outer_iter().enumerate() {
            let mut total = 0.0;
            for (hs, es) in h.exact_chunks(width).into_iter().zip(e.exact_chunks(width)) {
                let mut n = 0.0;
                for (x, y) in hs.iter().zip(es.iter()) {
                    n += (x - y) * (x - y);
                }
                total -= n.sqrt();
            }
            out[[b, j]] = total;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::ComplexNumber;
    use rand::Rng;

    const EPS: f64 = 1e-12;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn table_rows() {
        let hh = Variant::ModuleHH.groups();
        assert_eq!(hh.scalar, ElementKind::Quaternion);
        assert_eq!(hh.vector, ElementKind::Quaternion);
        assert_eq!(hh.scaling, ScalingGroup::UnitQuaternion);
        assert_eq!(hh.rotation, RotationGroup::UnitQuaternion);
        assert_eq!(hh.score, ScoreKind::Cosine);
        let rot = Variant::RotatE.groups();
        assert_eq!(rot.vector, ElementKind::Complex);
        assert_eq!(rot.rotation, RotationGroup::U1);
        assert_eq!(rot.score, ScoreKind::Distance);
        let rc = Variant::ModuleRC.groups();
        assert_eq!((rc.scalar, rc.vector, rc.scaling), (ElementKind::Real, ElementKind::Complex, ScalingGroup::GL1));
        for v in Variant::ALL {
            assert_eq!(Variant::from_tag(v.tag()).unwrap(), v);
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
    }

    #[test]
    fn init_shapes_and_determinism() {
        let a = ParameterStore::init(Variant::ModuleHH, 1, 2, 1, AblationMask::Both, 9);
        assert_eq!(a.entity_params(0).len(), 7);
        assert_eq!(a.relation_params(0).len(), 6);
        let b = ParameterStore::init(Variant::ModuleHH, 1, 2, 1, AblationMask::Both, 9);
        assert_eq!(a.entity_table(), b.entity_table());
        assert_eq!(a.relation_table(), b.relation_table());
        assert_eq!(Layout::new(Variant::ModuleHH, 128).entity_len(), 7 * 128);
    }

    #[test]
    fn materialized_vectors_are_unit() {
        for v in [Variant::ModuleRC, Variant::ModuleRH, Variant::ModuleHH, Variant::RotatE] {
            let s = ParameterStore::init(v, 5, 6, 3, AblationMask::Both, 1);
            for e in 0..6 {
                for x in s.entity_embedding(e, AblationMask::Both).unwrap().vector {
                    assert!(close(field_norm(&x), 1.0, 1e-9));
                }
            }
            for r in 0..3 {
                for x in s.relation_embedding(r, AblationMask::Both).unwrap().rotation {
                    assert!(close(field_norm(&x), 1.0, 1e-9));
                }
            }
        }
    }

    #[test]
    fn ablation_init_is_identity_on_frozen_parts() {
        let s = ParameterStore::init(Variant::ModuleHH, 3, 4, 2, AblationMask::ScalarOnly, 2);
        let l = s.layout();
        for e in 0..4 {
            assert!(s.entity_params(e)[l.entity_part(Part::Vector)].iter().all(|&x| x == 0.0));
        }
        let s = ParameterStore::init(Variant::ModuleRC, 3, 4, 2, AblationMask::VectorOnly, 2);
        for r in 0..2 {
            assert!(s.relation_params(r)[l.relation_part(Part::Scalar).start..3].iter().all(|&x| x == 1.0));
        }
    }

    #[test]
    fn combine_examples() {
        let ones = vec![ModuleElement::Real(1.0); 2];
        let v = vec![
            ModuleElement::Complex(ComplexNumber::new(0.6, 0.8)),
            ModuleElement::Complex(ComplexNumber::new(0.0, 1.0)),
        ];
        assert_eq!(combine(&ones, &v).unwrap(), v);
        let two = [ModuleElement::Real(2.0)];
        let q = phase(std::f64::consts::FRAC_PI_2);
        let got = combine(&two, &[ModuleElement::Complex(ComplexNumber::new(q.a, q.b))]).unwrap();
        assert!(close(got[0].to_quaternion().a, 0.0, 1e-15));
        assert_eq!(got[0].to_quaternion().b, 2.0);
        assert!(matches!(combine(&two, &v), Err(ModelError::LengthMismatch(1, 2))));
        let s = [ModuleElement::Quaternion(Quaternion::new(0.5, -1.0, 2.0, 0.3))];
        let u = [ModuleElement::from(exp_map([0.2, 1.0, -0.7]))];
        let c = combine(&s, &u).unwrap();
        assert!(close(field_norm(&c[0]), field_norm(&s[0]), 1e-12));
    }

    #[test]
    fn rc_transform_example() {
        // s_h = 1, v_h = 1, scale 3, rotation π → -3.
        let mut store = ParameterStore::identity(Variant::ModuleRC, 1, 1, 1);
        store.relation_params_mut(0).copy_from_slice(&[3.0, PI]);
        let h = store.entity_embedding(0, AblationMask::Both).unwrap();
        let r = store.relation_embedding(0, AblationMask::Both).unwrap();
        let out = transform_head(&h, &r, Variant::ModuleRC, AblationMask::Both).unwrap();
        let q = out[0].to_quaternion();
        assert!(close(q.a, -3.0, EPS) && close(q.b, 0.0, 1e-15));
    }

    #[test]
    fn identity_relation_leaves_head_combined() {
        let mut store = ParameterStore::init(Variant::ModuleHH, 4, 2, 1, AblationMask::Both, 5);
        store.relation_params_mut(0).fill(0.0);
        let h = store.entity_embedding(0, AblationMask::Both).unwrap();
        let r = store.relation_embedding(0, AblationMask::Both).unwrap();
        let out = transform_head(&h, &r, Variant::ModuleHH, AblationMask::Both).unwrap();
        assert_eq!(out, combine(&h.scalar, &h.vector).unwrap());
    }

    #[test]
    fn inverse_relation_recovers_head() {
        let store = ParameterStore::init(Variant::ModuleHH, 4, 1, 1, AblationMask::Both, 11);
        let h = store.entity_embedding(0, AblationMask::Both).unwrap();
        let r = store.relation_embedding(0, AblationMask::Both).unwrap();
        let inv = RelationEmbedding {
            scaling: r.scaling.iter().map(|g| g.to_quaternion().conj().into()).collect(),
            rotation: r.rotation.iter().map(|g| g.to_quaternion().conj().into()).collect(),
        };
        let once = transform_head(&h, &r, Variant::ModuleHH, AblationMask::Both).unwrap();
        // Undo element-wise: s ⊗ g ⊗ ḡ = s, v ⊗ g ⊗ ḡ = v.
        let scaled: Vec<_> = h.scalar.iter().zip(&r.scaling).map(|(s, g)| apply_scaling(s, g).unwrap()).collect();
        let rotated: Vec<_> = h.vector.iter().zip(&r.rotation).map(|(v, g)| apply_rotation(v, g).unwrap()).collect();
        let back = transform_head(
            &EntityEmbedding { scalar: scaled, vector: rotated },
            &inv,
            Variant::ModuleHH,
            AblationMask::Both,
        )
        .unwrap();
        let orig = combine(&h.scalar, &h.vector).unwrap();
        for (a, b) in back.iter().zip(&orig) {
            let d = a.to_quaternion() - b.to_quaternion();
            assert!(d.to_array().iter().all(|x| x.abs() < 1e-9));
        }
        assert_ne!(once, orig);
    }

    #[test]
    fn self_scores() {
        // h' = t: cosine gives Σ N(tᵢ), distance gives 0.
        let t = vec![ModuleElement::from(Quaternion::new(1.0, 2.0, 0.0, -1.0)), ModuleElement::from(Quaternion::ONE)];
        assert_eq!(score_tuples(&t, &t, ScoreKind::Cosine).unwrap(), 7.0);
        assert_eq!(score_tuples(&t, &t, ScoreKind::Distance).unwrap(), 0.0);
    }

    #[test]
    fn score_all_tails_matches_single_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for v in Variant::ALL {
            for mask in AblationMask::ALL {
                let store = ParameterStore::init(v, 3, 120, 4, mask, 17);
                let (h, r) = (rng.random_range(0..120), rng.random_range(0..4));
                let all = score_all_tails(h, r, &store, mask).unwrap();
                assert_eq!(all.len(), 120);
                for _ in 0..100 {
                    let j = rng.random_range(0..120);
                    let s = score(h, r, j, &store, mask).unwrap();
                    assert!(close(all[j], s, 1e-12), "{v} {mask}: {} vs {s}", all[j]);
                }
            }
        }
        let one = ParameterStore::init(Variant::ModuleHH, 2, 1, 1, AblationMask::Both, 0);
        let single = score_all_tails(0, 0, &one, AblationMask::Both).unwrap();
        assert_eq!(single.len(), 1);
        assert!(close(single[0], score(0, 0, 0, &one, AblationMask::Both).unwrap(), 1e-12));
    }

    #[test]
    fn out_of_range_ids() {
        let s = ParameterStore::init(Variant::ModuleRC, 2, 3, 1, AblationMask::Both, 0);
        assert!(matches!(score(3, 0, 0, &s, AblationMask::Both), Err(ModelError::IndexOutOfRange { .. })));
        assert!(matches!(score_all_tails(0, 1, &s, AblationMask::Both), Err(ModelError::IndexOutOfRange { .. })));
    }

    #[test]
    fn permuting_entities_permutes_scores() {
        let store = ParameterStore::init(Variant::ModuleRH, 3, 7, 2, AblationMask::Both, 4);
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let mut permuted = store.clone();
        for (new, &old) in perm.iter().enumerate() {
            permuted.entity_params_mut(new).copy_from_slice(store.entity_params(old));
        }
        // Head 0 in the permuted table is old entity 3.
        let a = score_all_tails(3, 1, &store, AblationMask::Both).unwrap();
        let b = score_all_tails(0, 1, &permuted, AblationMask::Both).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            assert_eq!(b[new], a[old]);
        }
    }

    #[test]
    fn rotations_are_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let mut q = || Quaternion::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let (x, y) = (q(), q());
            let g = exp_map([x.b, y.c, x.d]).quaternion();
            assert!(close((x * g).dot(y * g), x.dot(y), 1e-9));
        }
    }

    #[test]
    fn partition_of_free_parameters() {
        for v in Variant::ALL {
            let s = ParameterStore::init(v, 4, 5, 3, AblationMask::Both, 0);
            assert_eq!(
                s.free_parameter_count(AblationMask::ScalarOnly) + s.free_parameter_count(AblationMask::VectorOnly),
                s.free_parameter_count(AblationMask::Both)
            );
            let l = s.layout();
            assert_eq!(l.entity_part(Part::Scalar).end, l.entity_part(Part::Vector).start);
            assert_eq!(l.relation_part(Part::Scalar).end, l.relation_part(Part::Vector).start);
        }
    }

    #[test]
    fn checkpoint_payload_round_trip() {
        let s = ParameterStore::init(Variant::ModuleHH, 2, 3, 2, AblationMask::Both, 1);
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"MKGE");
        assert_eq!(buf.len(), 4 + 4 + 4 + 24 + 8 * (3 * 14 + 2 * 12));
        let back = ParameterStore::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, s);
        assert!(matches!(ParameterStore::read_from(&mut &buf[..20]), Err(ModelError::Truncated(_))));
        assert!(matches!(ParameterStore::read_from(&mut &b"XXXX"[..]), Err(ModelError::BadMagic)));
        assert!(matches!(ParameterStore::read_from(&mut &b"MK"[..]), Err(ModelError::BadMagic)));
    }
}
