//! Finite-difference gradient suites behind the `gradcheck` command.
//!
//! Each case draws random shapes and values from its seed and reduces the
//! op output to a scalar with fixed random weights, so every output
//! coordinate contributes a distinct amount to the checked gradient.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::check_named;
use crate::autodiff::{BnMode, Padding, ShiftConfig, Tape, Var};
use crate::data::synth::{generate, WorldSpec};
use crate::data::{augment::center_view, MultimodalSample};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::graph::{GraphConfig, Topology};
use crate::losses::{combined_loss, contrastive, logistic_pair_loss, mil_nce_loss, nce_loss, LossConfig, NegativePolicy};
use crate::model::{make_batch, Model, ModelConfig, Needs};
use crate::nn::{Forward, Mode};
use crate::params::is_bn_statistic;
use crate::tensor::Tensor;

/// Largest relative error accepted.
pub const THRESHOLD: f64 = 1e-4;
/// Central-difference step.
pub const EPS: f64 = 1e-5;
/// Largest share of coordinates that may be skipped as kink crossings.
pub const MAX_KINK_FRACTION: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Losses,
    EndToEnd,
}

impl Scope {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Scope::Ops),
            "losses" => Ok(Scope::Losses),
            "end-to-end" => Ok(Scope::EndToEnd),
            other => Err(Error::Config(format!("unknown gradcheck scope `{other}`"))),
        }
    }
}

/// Worst error of one case over all its seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub seeds: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    /// Seed, parameter and flat index of the worst coordinate.
    pub worst: Option<(u64, String, usize)>,
    /// Coordinates left unscored because their interval crossed a kink.
    pub kinks: usize,
}

impl CheckLine {
    /// Below threshold, with kink crossings rare enough that skipping them hides nothing systematic.
    pub fn passed(&self) -> bool {
        self.max_rel_error < THRESHOLD && (self.kinks as f64) <= MAX_KINK_FRACTION * self.coordinates as f64
    }
}

type Params = BTreeMap<String, Tensor<f64>>;
type Loss = Box<dyn FnMut(&mut Tape<f64>, &Params) -> Result<Var>>;

struct Case {
    params: Params,
    f: Loss,
}

type Build = fn(&mut ChaCha8Rng) -> Case;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// Values kept at least `gap` away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(gap..1.5);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn dims(rng: &mut ChaCha8Rng, rank: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.gen_range(lo..=hi)).collect()
}

/// `sum(y * W)` with `W` drawn from `seed` in the shape of `y`.
fn weighted(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = Tensor::randn(tape.shape(y).to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn unary(params: Params, op: impl Fn(&mut Tape<f64>, Var) -> Result<Var> + 'static, wseed: u64) -> Case {
    Case {
        params,
        f: Box::new(move |t, ps| {
            let x = t.param("x", &ps["x"]);
            let y = op(t, x)?;
            weighted(t, y, wseed)
        }),
    }
}

fn binary(params: Params, op: impl Fn(&mut Tape<f64>, Var, Var) -> Result<Var> + 'static, wseed: u64) -> Case {
    Case {
        params,
        f: Box::new(move |t, ps| {
            let a = t.param("a", &ps["a"]);
            let b = t.param("b", &ps["b"]);
            let y = op(t, a, b)?;
            weighted(t, y, wseed)
        }),
    }
}

fn one(x: Tensor<f64>) -> Params {
    BTreeMap::from([("x".to_string(), x)])
}

fn two(a: Tensor<f64>, b: Tensor<f64>) -> Params {
    BTreeMap::from([("a".to_string(), a), ("b".to_string(), b)])
}

fn op_cases() -> Vec<(&'static str, Build)> {
    vec![
        ("add", |r| {
            let s = dims(r, 3, 1, 4);
            let ws = r.gen();
            binary(two(randn(r, &s), randn(r, &s[1..])), |t, a, b| t.add(a, b), ws)
        }),
        ("sub", |r| {
            let s = dims(r, 2, 1, 5);
            let ws = r.gen();
            binary(two(randn(r, &s), randn(r, &s)), |t, a, b| t.sub(a, b), ws)
        }),
        ("mul", |r| {
            let s = dims(r, 3, 1, 4);
            let ws = r.gen();
            binary(two(randn(r, &s), randn(r, &s[2..])), |t, a, b| t.mul(a, b), ws)
        }),
        ("scale", |r| {
            let s = dims(r, 2, 1, 5);
            let c = r.gen_range(-3.0..3.0);
            let ws = r.gen();
            unary(one(randn(r, &s)), move |t, x| t.scale(x, c), ws)
        }),
        ("add_scalar", |r| {
            let s = dims(r, 2, 1, 5);
            let ws = r.gen();
            unary(one(randn(r, &s)), |t, x| t.add_scalar(x, 0.7), ws)
        }),
        ("matmul", |r| {
            let d = dims(r, 3, 1, 5);
            let ws = r.gen();
            binary(two(randn(r, &[d[0], d[1]]), randn(r, &[d[1], d[2]])), |t, a, b| t.matmul(a, b), ws)
        }),
        ("matmul_nt", |r| {
            let d = dims(r, 3, 1, 5);
            let ws = r.gen();
            binary(two(randn(r, &[d[0], d[1]]), randn(r, &[d[2], d[1]])), |t, a, b| t.matmul_nt(a, b), ws)
        }),
        ("matmul_chain", |r| {
            let ws = r.gen();
            let params: Params = ["a", "b", "c"].iter().map(|n| (n.to_string(), randn(r, &[4, 4]))).collect();
            Case {
                params,
                f: Box::new(move |t, ps| {
                    let a = t.param("a", &ps["a"]);
                    let b = t.param("b", &ps["b"]);
                    let c = t.param("c", &ps["c"]);
                    let ab = t.matmul(a, b)?;
                    let y = t.matmul(ab, c)?;
                    weighted(t, y, ws)
                }),
            }
        }),
        ("relu", |r| {
            let s = dims(r, 2, 1, 6);
            let ws = r.gen();
            unary(one(away_from_zero(r, &s, 0.05)), |t, x| t.relu(x), ws)
        }),
        ("exp", |r| {
            let s = dims(r, 2, 1, 5);
            let ws = r.gen();
            unary(one(randn(r, &s)), |t, x| t.exp(x), ws)
        }),
        ("log", |r| {
            let s = dims(r, 2, 1, 5);
            let ws = r.gen();
            let x = Tensor::uniform(s, 0.2, 3.0, r);
            unary(one(x), |t, x| t.log(x), ws)
        }),
        ("abs", |r| {
            let s = dims(r, 2, 1, 6);
            let ws = r.gen();
            unary(one(away_from_zero(r, &s, 0.05)), |t, x| t.abs(x), ws)
        }),
        ("softplus", |r| {
            let s = dims(r, 2, 1, 5);
            let ws = r.gen();
            unary(one(randn(r, &s)), |t, x| t.softplus(x), ws)
        }),
        ("sum", |r| {
            let s = dims(r, 3, 1, 4);
            unary(one(randn(r, &s)), |t, x| t.sum(x), 0)
        }),
        ("mean", |r| {
            let s = dims(r, 3, 1, 4);
            unary(one(randn(r, &s)), |t, x| t.mean(x), 0)
        }),
        ("sum_axis", |r| {
            let s = dims(r, 3, 1, 4);
            let axis = r.gen_range(0..3);
            let ws = r.gen();
            unary(one(randn(r, &s)), move |t, x| t.sum_axis(x, axis), ws)
        }),
        ("mean_axis", |r| {
            let s = dims(r, 3, 1, 4);
            let axis = r.gen_range(0..3);
            let ws = r.gen();
            unary(one(randn(r, &s)), move |t, x| t.mean_axis(x, axis), ws)
        }),
        ("max_axis", |r| {
            let s = dims(r, 3, 1, 4);
            let axis = r.gen_range(0..3);
            let ws = r.gen();
            // Distinct, well separated values keep the argmax stable under perturbation.
            let n: usize = s.iter().product();
            let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
            vals.shuffle(r);
            unary(one(Tensor::new(s, vals).unwrap()), move |t, x| t.max_axis(x, axis), ws)
        }),
        ("reshape", |r| {
            let s = dims(r, 3, 1, 4);
            let ws = r.gen();
            let flat = s.iter().product::<usize>();
            unary(one(randn(r, &s)), move |t, x| t.reshape(x, &[flat]), ws)
        }),
        ("transpose", |r| {
            let s = dims(r, 3, 1, 4);
            let ws = r.gen();
            unary(one(randn(r, &s)), |t, x| t.transpose(x, &[2, 0, 1]), ws)
        }),
        ("concat", |r| {
            let s = dims(r, 2, 1, 4);
            let axis = r.gen_range(0..2);
            let mut s2 = s.clone();
            s2[axis] = r.gen_range(1..4);
            let ws = r.gen();
            binary(two(randn(r, &s), randn(r, &s2)), move |t, a, b| t.concat(&[a, b], axis), ws)
        }),
        ("slice", |r| {
            let s = vec![r.gen_range(3..6), r.gen_range(1..4)];
            let ws = r.gen();
            unary(one(randn(r, &s)), |t, x| t.slice(x, 0, 1, 2), ws)
        }),
        ("l2_normalize", |r| {
            let s = dims(r, 2, 1, 5);
            let ws = r.gen();
            unary(one(randn(r, &s)), |t, x| t.l2_normalize(x), ws)
        }),
        ("masked_logsumexp", |r| {
            let s = dims(r, 2, 1, 5);
            let mut mask: Vec<bool> = (0..s[0] * s[1]).map(|_| r.gen()).collect();
            for i in 0..s[0] {
                mask[i * s[1]] = true;
            }
            let ws = r.gen();
            unary(one(randn(r, &s)), move |t, x| t.masked_logsumexp(x, &mask), ws)
        }),
        ("conv2d", |r| {
            let (n, h, w, ci, co) = (r.gen_range(1..3), r.gen_range(3..6), r.gen_range(3..6), r.gen_range(1..3), r.gen_range(1..3));
            let stride = r.gen_range(1..3);
            let pad = if r.gen() { Padding::Zero } else { Padding::Valid };
            let ws = r.gen();
            let params = BTreeMap::from([
                ("x".to_string(), randn(r, &[n, h, w, ci])),
                ("w".to_string(), randn(r, &[3, 3, ci, co])),
                ("b".to_string(), randn(r, &[co])),
            ]);
            Case {
                params,
                f: Box::new(move |t, ps| {
                    let x = t.param("x", &ps["x"]);
                    let w = t.param("w", &ps["w"]);
                    let b = t.param("b", &ps["b"]);
                    let y = t.conv2d(x, w, Some(b), (stride, stride), pad)?;
                    weighted(t, y, ws)
                }),
            }
        }),
        ("conv3d", |r| {
            let (n, tt, h, ci, co) = (r.gen_range(1..3), r.gen_range(2..5), r.gen_range(3..5), r.gen_range(1..3), r.gen_range(1..3));
            let kt = r.gen_range(1..=2);
            let tp = if r.gen() { Padding::Zero } else { Padding::Valid };
            let sp = if r.gen() { Padding::Zero } else { Padding::Valid };
            let stride = r.gen_range(1..3);
            let ws = r.gen();
            let params = BTreeMap::from([
                ("x".to_string(), randn(r, &[n, tt, h, h, ci])),
                ("w".to_string(), randn(r, &[kt, 2, 2, ci, co])),
                ("b".to_string(), randn(r, &[co])),
            ]);
            Case {
                params,
                f: Box::new(move |t, ps| {
                    let x = t.param("x", &ps["x"]);
                    let w = t.param("w", &ps["w"]);
                    let b = t.param("b", &ps["b"]);
                    let y = t.conv3d(x, w, Some(b), (stride, stride), tp, sp)?;
                    weighted(t, y, ws)
                }),
            }
        }),
        ("batch_norm_train", |r| {
            let (n, c) = (r.gen_range(3..7), r.gen_range(1..4));
            let ws = r.gen();
            bn_case(r, vec![n, 2, c], ws, true)
        }),
        ("batch_norm_eval", |r| {
            let (n, c) = (r.gen_range(1..5), r.gen_range(1..4));
            let ws = r.gen();
            bn_case(r, vec![n, c], ws, false)
        }),
        ("temporal_shift", |r| {
            let (n, tt, c) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(2..9));
            let cfg = ShiftConfig { shift_fraction: 0.25, enabled: true };
            let ws = r.gen();
            unary(one(randn(r, &[n, tt, 2, 2, c])), move |t, x| t.temporal_shift(x, cfg), ws)
        }),
        ("gather_rows", |r| {
            let (v, d) = (r.gen_range(2..6), r.gen_range(1..4));
            let ids: Vec<usize> = (0..r.gen_range(1..7)).map(|_| r.gen_range(0..v)).collect();
            let ws = r.gen();
            unary(one(randn(r, &[v, d])), move |t, x| t.gather_rows(x, &ids), ws)
        }),
        ("spatiotemporal_pool", |r| {
            let s = vec![r.gen_range(1..3), r.gen_range(1..4), 2, 3, r.gen_range(1..4)];
            let ws = r.gen();
            unary(one(randn(r, &s)), |t, x| crate::nn::pool_var(t, x, crate::nn::PoolKind::SpatiotemporalAvg), ws)
        }),
    ]
}

fn bn_case(r: &mut ChaCha8Rng, shape: Vec<usize>, ws: u64, train: bool) -> Case {
    let c = *shape.last().unwrap();
    let mean: Vec<f64> = (0..c).map(|_| r.gen_range(-0.5..0.5)).collect();
    let var: Vec<f64> = (0..c).map(|_| r.gen_range(0.5..2.0)).collect();
    let params = BTreeMap::from([
        ("x".to_string(), randn(r, &shape)),
        ("gamma".to_string(), Tensor::uniform([c], 0.5, 1.5, r)),
        ("beta".to_string(), randn(r, &[c])),
    ]);
    Case {
        params,
        f: Box::new(move |t, ps| {
            let x = t.param("x", &ps["x"]);
            let g = t.param("gamma", &ps["gamma"]);
            let b = t.param("beta", &ps["beta"]);
            let mode = if train {
                BnMode::Train { eps: 1e-5 }
            } else {
                BnMode::Eval { mean: &mean, var: &var, eps: 1e-5 }
            };
            let (y, _) = t.batch_norm(x, g, b, mode)?;
            weighted(t, y, ws)
        }),
    }
}

/// `n` unit rows of width `d` registered as parameter `name`.
fn unit_param(t: &mut Tape<f64>, ps: &Params, name: &str) -> Result<Var> {
    let v = t.param(name, &ps[name]);
    t.l2_normalize(v)
}

fn loss_cases() -> Vec<(&'static str, Build)> {
    vec![
        ("nce_both_directions", |r| nce_case(r, NegativePolicy::BothDirections)),
        ("nce_v_anchored", |r| nce_case(r, NegativePolicy::VAnchored)),
        ("mil_nce", |r| {
            let (n, d) = (r.gen_range(2..6), r.gen_range(2..6));
            let owner: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat(i).take(1 + (i % 3))).collect();
            let m = owner.len();
            let params = two(randn(r, &[n, d]), randn(r, &[m, d]));
            Case {
                params,
                f: Box::new(move |t, ps| {
                    let zv = unit_param(t, ps, "a")?;
                    let zt = unit_param(t, ps, "b")?;
                    Ok(mil_nce_loss(t, zv, zt, &owner, 0.25, NegativePolicy::BothDirections)?.mean)
                }),
            }
        }),
        ("logistic_pair", |r| {
            let (p, d) = (r.gen_range(1..6), r.gen_range(2..6));
            let labels: Vec<bool> = (0..p).map(|_| r.gen()).collect();
            Case {
                params: two(randn(r, &[p, d]), randn(r, &[p, d])),
                f: Box::new(move |t, ps| {
                    let zv = unit_param(t, ps, "a")?;
                    let za = unit_param(t, ps, "b")?;
                    logistic_pair_loss(t, zv, za, &labels, 0.5)
                }),
            }
        }),
        ("combined_loss", |r| {
            let (n, d) = (r.gen_range(2..6), r.gen_range(2..5));
            let with_text: Vec<usize> = (0..n).filter(|_| r.gen_bool(0.7)).collect();
            let k = r.gen_range(1..4);
            let m = with_text.len() * k;
            let cfg = LossConfig { lambda_va: r.gen_range(0.1..2.0), lambda_vt: r.gen_range(0.1..2.0), tau: 0.25, ..LossConfig::default() };
            let params = BTreeMap::from([
                ("v".to_string(), randn(r, &[n, d])),
                ("a".to_string(), randn(r, &[n, d])),
                ("t".to_string(), randn(r, &[m.max(1), d])),
            ]);
            Case {
                params,
                f: Box::new(move |t, ps| {
                    let zv = unit_param(t, ps, "v")?;
                    let za = unit_param(t, ps, "a")?;
                    let zt = unit_param(t, ps, "t")?;
                    let va = crate::losses::PairTerm { zv, zx: za, owner: (0..n).collect() };
                    let vt = if with_text.is_empty() {
                        None
                    } else {
                        let zvt = t.gather_rows(zv, &with_text)?;
                        let owner: Vec<usize> = (0..with_text.len()).flat_map(|i| std::iter::repeat(i).take(k)).collect();
                        Some(crate::losses::PairTerm { zv: zvt, zx: zt, owner })
                    };
                    let batch = crate::losses::EmbeddedBatch { va: Some(va), vt };
                    Ok(combined_loss(t, &batch, &cfg)?.total)
                }),
            }
        }),
        ("contrastive_single_anchor", |r| {
            let d = r.gen_range(2..5);
            Case {
                params: two(randn(r, &[2, d]), randn(r, &[3, d])),
                f: Box::new(move |t, ps| {
                    let zv = unit_param(t, ps, "a")?;
                    let zx = unit_param(t, ps, "b")?;
                    Ok(contrastive(t, zv, zx, &[0, 1, 1], 0.3, NegativePolicy::BothDirections)?.mean)
                }),
            }
        }),
    ]
}

fn nce_case(r: &mut ChaCha8Rng, policy: NegativePolicy) -> Case {
    let (n, d) = (r.gen_range(2..7), r.gen_range(2..6));
    // Small temperatures saturate the softmax and push gradients below the
    // finite-difference noise floor, where the comparison says nothing.
    let tau = r.gen_range(0.2..1.0);
    Case {
        params: two(randn(r, &[n, d]), randn(r, &[n, d])),
        f: Box::new(move |t, ps| {
            let zv = unit_param(t, ps, "a")?;
            let za = unit_param(t, ps, "b")?;
            Ok(nce_loss(t, zv, za, tau, policy)?.mean)
        }),
    }
}

/// Tiny model configuration used for end-to-end checks.
pub fn tiny_model_config(topology: Topology) -> ModelConfig {
    ModelConfig {
        encoders: EncoderConfig {
            frames: 3,
            crop: 6,
            video_widths: vec![3],
            video_kt: 2,
            audio_widths: vec![3],
            d_v: 4,
            d_a: 4,
            d_t: 4,
            word_dim: 4,
            audio_secs: 0.05,
            mel: crate::encoders::audio::MelConfig { n_bins: 12, ..Default::default() },
            ..EncoderConfig::default()
        },
        graph: GraphConfig {
            d_va: 3,
            d_vt: 3,
            d_vat: 3,
            d_hidden: 4,
            ..GraphConfig::new(topology)
        },
    }
}

/// Four samples matching [`tiny_model_config`]; the last one lacks text.
pub fn tiny_batch(seed: u64) -> Result<Vec<MultimodalSample>> {
    let spec = WorldSpec { frames: 3, height: 8, width: 8, audio_secs: 0.05, rho: 0.0, ..WorldSpec::default() };
    let mut samples = generate(&spec, seed, 4)?;
    for s in samples.iter_mut() {
        s.video = Some(center_view(s.video.as_ref().unwrap(), 8, 6)?);
    }
    samples[3].text = None;
    Ok(samples)
}

/// Smallest distance from a kink at which end-to-end cases are checked.
const MIN_KINK_MARGIN: f64 = 1e-4;

fn end_to_end_case(topology: Topology, seed: u64) -> Result<Case> {
    let base = Model::<f64>::new(tiny_model_config(topology), seed)?;
    let samples = tiny_batch(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // Offsets are redrawn until no ReLU or max sits within MIN_KINK_MARGIN of
    // its corner, where a central difference straddles two branches.
    for _ in 0..64 {
        let case = perturbed_case(&base, &samples, &mut rng)?;
        let Case { params, mut f } = case;
        let mut tape = Tape::new();
        f(&mut tape, &params)?;
        if tape.kink_margin() >= MIN_KINK_MARGIN {
            return Ok(Case { params, f });
        }
    }
    Err(Error::invalid(format!("no kink-free point found for {} seed {seed}", topology.name())))
}

fn perturbed_case(base: &Model<f64>, samples: &[MultimodalSample], rng: &mut ChaCha8Rng) -> Result<Case> {
    let mut model = base.clone();
    // Zero-initialised biases can leave a head output at the origin, where
    // normalisation is singular; random offsets keep the point generic.
    let names: Vec<String> = model.params.names().filter(|n| n.ends_with(".bias") || n.ends_with(".beta")).cloned().collect();
    for n in names {
        for v in model.params.get_mut(&n)?.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    let samples = samples.to_vec();
    // Moving statistics and the frozen word table are not trainable.
    let (params, fixed): (Params, Params) = model
        .params
        .as_map()
        .clone()
        .into_iter()
        .partition(|(n, _)| !is_bn_statistic(n) && n != crate::encoders::text::TABLE);
    let cfg = LossConfig::default();
    Ok(Case {
        params,
        f: Box::new(move |t, ps| {
            let mut all = fixed.clone();
            all.extend(ps.iter().map(|(k, v)| (k.clone(), v.clone())));
            let mut m = model.clone();
            m.params = crate::params::ParamStore::from_map(all);
            let refs: Vec<&MultimodalSample> = samples.iter().collect();
            let mut fwd = Forward::new(t, &m.params, Mode::Train);
            let batch = make_batch(&mut fwd, &m, &refs, Needs::default())?;
            Ok(combined_loss(t, &batch, &cfg)?.total)
        }),
    })
}

fn run_case(name: &str, mut make: impl FnMut(u64) -> Result<Case>, seeds: usize, tamper: bool) -> Result<CheckLine> {
    let mut line = CheckLine { name: name.to_string(), seeds, coordinates: 0, max_rel_error: 0.0, worst: None, kinks: 0 };
    // The negative control scales the first analytic coordinate of every parameter.
    let corrupt = |_: &str, g: &mut Tensor<f64>| {
        if let Some(v) = g.data_mut().first_mut() {
            *v = *v * 1.5 + 1e-3;
        }
    };
    for seed in 0..seeds as u64 {
        let Case { params, f } = make(seed)?;
        let tamper: Option<&dyn Fn(&str, &mut Tensor<f64>)> = if tamper { Some(&corrupt) } else { None };
        let report = check_named(f, &params, EPS, tamper)?;
        line.coordinates += report.coordinates;
        line.kinks += report.kinks;
        if report.max_rel_error >= line.max_rel_error {
            line.max_rel_error = report.max_rel_error;
            line.worst = report.worst.map(|(n, i)| (seed, n, i));
        }
    }
    Ok(line)
}

/// Run every case of `scope` over `seeds` seeds.
pub fn run(scope: Scope, seeds: usize, tamper: bool) -> Result<Vec<CheckLine>> {
    let seeded = |build: Build| move |seed: u64| -> Result<Case> { Ok(build(&mut ChaCha8Rng::seed_from_u64(seed))) };
    match scope {
        Scope::Ops => op_cases().into_iter().map(|(n, b)| run_case(n, seeded(b), seeds, tamper)).collect(),
        Scope::Losses => loss_cases().into_iter().map(|(n, b)| run_case(n, seeded(b), seeds, tamper)).collect(),
        Scope::EndToEnd => [Topology::Shared, Topology::Disjoint, Topology::Fac]
            .into_iter()
            .map(|t| run_case(&format!("end_to_end_{}", t.name()), |s| end_to_end_case(t, s), seeds, tamper))
            .collect(),
    }
}
