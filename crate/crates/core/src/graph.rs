//! Modality embedding graphs: projection heads `g_{m->s}` and the three topologies.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::nn::{self, Forward};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Video,
    Audio,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Video, Modality::Audio, Modality::Text];

    pub fn short(self) -> &'static str {
        match self {
            Modality::Video => "v",
            Modality::Audio => "a",
            Modality::Text => "t",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Va,
    Vt,
    Vat,
}

impl Space {
    pub const ALL: [Space; 3] = [Space::Va, Space::Vt, Space::Vat];

    pub fn short(self) -> &'static str {
        match self {
            Space::Va => "va",
            Space::Vt => "vt",
            Space::Vat => "vat",
        }
    }
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    Shared,
    Disjoint,
    Fac,
}

impl Topology {
    pub fn name(self) -> &'static str {
        match self {
            Topology::Shared => "shared",
            Topology::Disjoint => "disjoint",
            Topology::Fac => "fac",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Linear,
    Nonlinear,
}

/// One projection head. Nonlinear heads are `linear -> BN -> ReLU -> linear`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    pub name: String,
    pub kind: HeadKind,
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_out: usize,
}

impl ProjectionHead {
    pub fn init<F: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<F>, rng: &mut R) {
        match self.kind {
            HeadKind::Linear => nn::init_linear(store, &format!("{}.fc", self.name), self.d_in, self.d_out, 1.0, rng),
            HeadKind::Nonlinear => {
                // The first layer feeds batch norm, so its bias would be redundant.
                nn::init_linear(store, &format!("{}.fc1", self.name), self.d_in, self.d_hidden, 2.0, rng);
                store.remove(&format!("{}.fc1.bias", self.name));
                nn::init_batch_norm(store, &format!("{}.bn", self.name), self.d_hidden);
                nn::init_linear(store, &format!("{}.fc2", self.name), self.d_hidden, self.d_out, 1.0, rng);
            }
        }
    }

    /// Raw (unnormalized) head output for a `[N, d_in]` input.
    pub fn forward<F: Scalar>(&self, fwd: &mut Forward<'_, '_, F>, x: crate::autodiff::Var) -> Result<crate::autodiff::Var> {
        let d = fwd.tape.shape(x).to_vec();
        if d.len() != 2 || d[1] != self.d_in {
            return Err(Error::shape("projection head", format!("{} expects [N, {}], got {d:?}", self.name, self.d_in)));
        }
        match self.kind {
            HeadKind::Linear => fwd.linear(&format!("{}.fc", self.name), x),
            HeadKind::Nonlinear => {
                let w = fwd.param(&format!("{}.fc1.weight", self.name))?;
                let h = fwd.tape.matmul(x, w)?;
                let h = fwd.batch_norm(&format!("{}.bn", self.name), h)?;
                let h = fwd.tape.relu(h)?;
                fwd.linear(&format!("{}.fc2", self.name), h)
            }
        }
    }
}

fn default_d_va() -> usize {
    32
}
fn default_d_vt() -> usize {
    32
}
fn default_d_vat() -> usize {
    16
}
fn default_hidden() -> usize {
    64
}
fn nonlinear() -> HeadKind {
    HeadKind::Nonlinear
}
fn linear() -> HeadKind {
    HeadKind::Linear
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    pub topology: Topology,
    #[serde(default = "default_d_va")]
    pub d_va: usize,
    #[serde(default = "default_d_vt")]
    pub d_vt: usize,
    #[serde(default = "default_d_vat")]
    pub d_vat: usize,
    /// Hidden width of nonlinear heads.
    #[serde(default = "default_hidden")]
    pub d_hidden: usize,
    #[serde(default = "nonlinear")]
    pub video_head: HeadKind,
    #[serde(default = "linear")]
    pub audio_head: HeadKind,
    #[serde(default = "linear")]
    pub text_head: HeadKind,
    /// Kind of the fine-to-coarse map `g_{va->vat}` (fac only).
    #[serde(default = "linear")]
    pub fine_to_coarse_head: HeadKind,
    /// Normalize the fine vector before mapping it into the coarse space (fac only).
    #[serde(default)]
    pub normalize_fine: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig::new(Topology::Fac)
    }
}

impl GraphConfig {
    pub fn new(topology: Topology) -> Self {
        GraphConfig {
            topology,
            d_va: default_d_va(),
            d_vt: default_d_vt(),
            d_vat: default_d_vat(),
            d_hidden: default_hidden(),
            video_head: HeadKind::Nonlinear,
            audio_head: HeadKind::Linear,
            text_head: HeadKind::Linear,
            fine_to_coarse_head: HeadKind::Linear,
            normalize_fine: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = match self.topology {
            Topology::Shared => vec![self.d_vat],
            Topology::Disjoint => vec![self.d_va, self.d_vt],
            Topology::Fac => vec![self.d_va, self.d_vat],
        };
        if dims.contains(&0) || self.d_hidden == 0 {
            return Err(Error::Config("embedding dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Exact reachability table of the three topologies.
    pub fn reachable(&self, m: Modality, s: Space) -> bool {
        use Modality::*;
        use Space::*;
        match self.topology {
            Topology::Shared => s == Vat,
            Topology::Disjoint => matches!((m, s), (Video, Va) | (Audio, Va) | (Video, Vt) | (Text, Vt)),
            Topology::Fac => matches!((m, s), (Video, Va) | (Audio, Va) | (_, Vat)),
        }
    }

    pub fn check(&self, m: Modality, s: Space) -> Result<()> {
        if self.reachable(m, s) {
            Ok(())
        } else {
            Err(Error::UnreachablePair {
                modality: m,
                space: s,
                topology: self.topology.name(),
            })
        }
    }

    pub fn space_dim(&self, s: Space) -> usize {
        match s {
            Space::Va => self.d_va,
            Space::Vt => self.d_vt,
            Space::Vat => self.d_vat,
        }
    }

    /// Space shared by video and audio for the va loss term.
    pub fn va_space(&self) -> Space {
        match self.topology {
            Topology::Shared => Space::Vat,
            Topology::Disjoint | Topology::Fac => Space::Va,
        }
    }

    /// Space shared by video and text for the vt loss term.
    pub fn vt_space(&self) -> Space {
        match self.topology {
            Topology::Shared | Topology::Fac => Space::Vat,
            Topology::Disjoint => Space::Vt,
        }
    }

    /// Space in which text queries audio, if any.
    pub fn at_space(&self) -> Option<Space> {
        match self.topology {
            Topology::Shared | Topology::Fac => Some(Space::Vat),
            Topology::Disjoint => None,
        }
    }

    fn kind_for(&self, m: Modality) -> HeadKind {
        match m {
            Modality::Video => self.video_head,
            Modality::Audio => self.audio_head,
            Modality::Text => self.text_head,
        }
    }

    /// The head that leaves modality `m` on the way to space `s`.
    ///
    /// For fac's coarse space, video and audio leave through their fine heads.
    pub fn entry_head(&self, m: Modality, s: Space, d_in: usize) -> Result<ProjectionHead> {
        self.check(m, s)?;
        let target = if self.topology == Topology::Fac && m != Modality::Text { Space::Va } else { s };
        Ok(ProjectionHead {
            name: format!("head.{}_{}", m, target),
            kind: self.kind_for(m),
            d_in,
            d_hidden: self.d_hidden,
            d_out: self.space_dim(target),
        })
    }

    /// `g_{va->vat}`; only present in fac.
    pub fn fine_to_coarse(&self) -> Option<ProjectionHead> {
        (self.topology == Topology::Fac).then(|| ProjectionHead {
            name: "head.va_vat".into(),
            kind: self.fine_to_coarse_head,
            d_in: self.d_va,
            d_hidden: self.d_hidden,
            d_out: self.d_vat,
        })
    }

    /// Every head in the graph, deduplicated.
    pub fn heads(&self, d_v: usize, d_a: usize, d_t: usize) -> Vec<ProjectionHead> {
        let mut out: Vec<ProjectionHead> = Vec::new();
        for m in Modality::ALL {
            let d_in = match m {
                Modality::Video => d_v,
                Modality::Audio => d_a,
                Modality::Text => d_t,
            };
            for s in Space::ALL {
                if let Ok(h) = self.entry_head(m, s, d_in) {
                    if !out.iter().any(|o| o.name == h.name) {
                        out.push(h);
                    }
                }
            }
        }
        out.extend(self.fine_to_coarse());
        out
    }

    pub fn init<F: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<F>, dims: (usize, usize, usize), rng: &mut R) {
        for h in self.heads(dims.0, dims.1, dims.2) {
            h.init(store, rng);
        }
    }

    /// Project `[N, d_m]` representations into space `s`, L2-normalized.
    pub fn project<F: Scalar>(
        &self,
        fwd: &mut Forward<'_, '_, F>,
        rep: crate::autodiff::Var,
        m: Modality,
        s: Space,
    ) -> Result<crate::autodiff::Var> {
        let raw = self.project_raw(fwd, rep, m, s)?;
        fwd.tape.l2_normalize(raw)
    }

    /// Unnormalized projection. In fac, coarse video/audio vectors are the
    /// fine-to-coarse head applied to the raw fine vector.
    pub fn project_raw<F: Scalar>(
        &self,
        fwd: &mut Forward<'_, '_, F>,
        rep: crate::autodiff::Var,
        m: Modality,
        s: Space,
    ) -> Result<crate::autodiff::Var> {
        let d_in = fwd.tape.shape(rep).last().copied().unwrap_or(0);
        let head = self.entry_head(m, s, d_in)?;
        let fine = head.forward(fwd, rep)?;
        match (self.topology, m, s) {
            (Topology::Fac, Modality::Video | Modality::Audio, Space::Vat) => self.coarsen(fwd, fine),
            _ => Ok(fine),
        }
    }

    /// Normalized embeddings of one representation batch in several spaces.
    ///
    /// Each entry head runs once, so in fac the coarse vectors reuse the
    /// fine pass (and its batch statistics) instead of recomputing it.
    pub fn project_many<F: Scalar>(
        &self,
        fwd: &mut Forward<'_, '_, F>,
        rep: crate::autodiff::Var,
        m: Modality,
        spaces: &[Space],
    ) -> Result<Vec<crate::autodiff::Var>> {
        let d_in = fwd.tape.shape(rep).last().copied().unwrap_or(0);
        let mut entries: Vec<(String, crate::autodiff::Var)> = Vec::new();
        let mut out = Vec::with_capacity(spaces.len());
        for &s in spaces {
            let head = self.entry_head(m, s, d_in)?;
            let fine = match entries.iter().find(|(n, _)| *n == head.name) {
                Some(&(_, v)) => v,
                None => {
                    let v = head.forward(fwd, rep)?;
                    entries.push((head.name.clone(), v));
                    v
                }
            };
            let raw = match (self.topology, m, s) {
                (Topology::Fac, Modality::Video | Modality::Audio, Space::Vat) => self.coarsen(fwd, fine)?,
                _ => fine,
            };
            out.push(fwd.tape.l2_normalize(raw)?);
        }
        Ok(out)
    }

    /// Apply `g_{va->vat}` to raw fine vectors.
    pub fn coarsen<F: Scalar>(&self, fwd: &mut Forward<'_, '_, F>, fine: crate::autodiff::Var) -> Result<crate::autodiff::Var> {
        let head = self
            .fine_to_coarse()
            .ok_or_else(|| Error::invalid(format!("no fine-to-coarse head in the {} graph", self.topology.name())))?;
        let input = if self.normalize_fine { fwd.tape.l2_normalize(fine)? } else { fine };
        head.forward(fwd, input)
    }
}

/// A unit vector tagged with the modality and space it lives in.
#[derive(Clone, Debug, PartialEq)]
pub struct JointEmbedding {
    pub vector: Tensor<f64>,
    pub modality: Modality,
    pub space: Space,
}

/// Dot product of two embeddings in the same space.
pub fn similarity(z1: &JointEmbedding, z2: &JointEmbedding) -> Result<f64> {
    if z1.space != z2.space {
        return Err(Error::SpaceMismatch(z1.space, z2.space));
    }
    if z1.vector.shape() != z2.vector.shape() {
        return Err(Error::shape("similarity", format!("{:?} vs {:?}", z1.vector.shape(), z2.vector.shape())));
    }
    Ok(z1.vector.data().iter().zip(z2.vector.data()).map(|(a, b)| a * b).sum())
}

/// Eager projection of a single representation vector.
pub fn project_vector<F: Scalar>(
    graph: &GraphConfig,
    store: &ParamStore<F>,
    rep: &Tensor<F>,
    m: Modality,
    s: Space,
) -> Result<JointEmbedding> {
    graph.check(m, s)?;
    if rep.rank() != 1 {
        return Err(Error::shape("project", format!("expected a vector, got {:?}", rep.shape())));
    }
    let mut tape = Tape::inference();
    let mut fwd = Forward::new(&mut tape, store, nn::Mode::Eval);
    let x = fwd.tape.constant(rep.reshape([1, rep.numel()])?);
    let z = graph.project(&mut fwd, x, m, s)?;
    let v = tape.value(z).cast::<f64>().into_reshaped([graph.space_dim(s)])?;
    Ok(JointEmbedding {
        vector: v,
        modality: m,
        space: s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reachability_table_is_exact() {
        use Modality::*;
        use Space::*;
        let expect = |t: Topology| -> Vec<(Modality, Space)> {
            match t {
                Topology::Shared => vec![(Video, Vat), (Audio, Vat), (Text, Vat)],
                Topology::Disjoint => vec![(Video, Va), (Video, Vt), (Audio, Va), (Text, Vt)],
                Topology::Fac => vec![(Video, Va), (Video, Vat), (Audio, Va), (Audio, Vat), (Text, Vat)],
            }
        };
        for t in [Topology::Shared, Topology::Disjoint, Topology::Fac] {
            let g = GraphConfig::new(t);
            let got: Vec<_> = Modality::ALL
                .iter()
                .flat_map(|&m| Space::ALL.iter().map(move |&s| (m, s)))
                .filter(|&(m, s)| g.reachable(m, s))
                .collect();
            assert_eq!(got, expect(t), "{t:?}");
        }
    }

    #[test]
    fn fac_has_no_direct_coarse_heads_for_video_or_audio() {
        let g = GraphConfig::new(Topology::Fac);
        let names: Vec<String> = g.heads(8, 8, 8).into_iter().map(|h| h.name).collect();
        assert_eq!(names, ["head.v_va", "head.a_va", "head.t_vat", "head.va_vat"]);
    }

    #[test]
    fn similarity_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = Tensor::<f64>::randn([5], 1.0, &mut rng);
        let n = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let z = JointEmbedding { vector: v.map(|x| x / n), modality: Modality::Video, space: Space::Va };
        let neg = JointEmbedding { vector: z.vector.map(|x| -x), ..z.clone() };
        assert!((similarity(&z, &z).unwrap() - 1.0).abs() < 1e-12);
        assert!((similarity(&z, &neg).unwrap() + 1.0).abs() < 1e-12);
        let other = JointEmbedding { space: Space::Vat, ..z.clone() };
        assert!(matches!(similarity(&z, &other), Err(Error::SpaceMismatch(..))));
    }
}
