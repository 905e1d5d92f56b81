//! Which modality reaches which space, and what each graph can answer.

use mmvc::autodiff::Tape;
use mmvc::config::RunConfig;
use mmvc::error::Error;
use mmvc::eval::{run_task, Task};
use mmvc::graph::{project_vector, similarity, GraphConfig, JointEmbedding, Modality, Space, Topology};
use mmvc::model::Model;
use mmvc::nn::{Forward, Mode};
use mmvc::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOPOLOGIES: [Topology; 3] = [Topology::Shared, Topology::Disjoint, Topology::Fac];

fn small_config(topology: Topology) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.graph = GraphConfig::new(topology);
    cfg.eval.retrieval_items = 24;
    cfg.eval.probe_samples = 60;
    cfg.eval.probe.steps = 20;
    cfg.eval.probe.l2_sweep = vec![0.0];
    cfg
}

#[test]
fn disjoint_rejects_cross_pairs_and_audio_text() {
    let g = GraphConfig::new(Topology::Disjoint);
    for (m, s) in [(Modality::Audio, Space::Vt), (Modality::Text, Space::Va)] {
        assert!(matches!(g.check(m, s), Err(Error::UnreachablePair { .. })));
    }
    // No space holds both audio and text.
    for s in Space::ALL {
        assert!(!(g.reachable(Modality::Audio, s) && g.reachable(Modality::Text, s)), "{s:?}");
    }
    assert!(g.at_space().is_none());
}

#[test]
fn every_graph_lets_video_meet_audio_and_text() {
    for t in TOPOLOGIES {
        let g = GraphConfig::new(t);
        assert!(g.reachable(Modality::Video, g.va_space()) && g.reachable(Modality::Audio, g.va_space()));
        assert!(g.reachable(Modality::Video, g.vt_space()) && g.reachable(Modality::Text, g.vt_space()));
        if let Some(s) = g.at_space() {
            assert!(g.reachable(Modality::Audio, s) && g.reachable(Modality::Text, s));
        }
    }
}

#[test]
fn unreachable_projection_fails_before_touching_weights() {
    let model = Model::<f64>::new(small_config(Topology::Disjoint).model_config(), 0).unwrap();
    let rep = Tensor::<f64>::zeros([model.encoders().d_a]);
    let err = project_vector(model.graph(), &model.params, &rep, Modality::Audio, Space::Vt).unwrap_err();
    assert!(matches!(err, Error::UnreachablePair { .. }), "{err}");
}

#[test]
fn similarity_needs_a_common_space() {
    let z = |s| JointEmbedding { vector: Tensor::new([2], vec![1.0, 0.0]).unwrap(), modality: Modality::Video, space: s };
    assert!(matches!(similarity(&z(Space::Va), &z(Space::Vat)), Err(Error::SpaceMismatch(..))));
    assert_eq!(similarity(&z(Space::Va), &z(Space::Va)).unwrap(), 1.0);
}

#[test]
fn text_to_audio_retrieval_by_topology() {
    for t in TOPOLOGIES {
        let cfg = small_config(t);
        let model = Model::<f32>::new(cfg.model_config(), 1).unwrap();
        let out = run_task(&model, &cfg, Task::RetrievalT2a);
        match t {
            Topology::Disjoint => assert!(matches!(out, Err(Error::UnreachableTask { .. })), "{t:?}"),
            _ => {
                let r = out.unwrap();
                let r10 = r.get("R@10").unwrap();
                assert!((0.0..=1.0).contains(&r10));
                assert!(r.get("MedR").unwrap() >= 1.0);
            }
        }
    }
}

#[test]
fn fac_coarse_embeddings_factor_through_the_fine_to_coarse_head() {
    let cfg = small_config(Topology::Fac);
    let model = Model::<f64>::new(cfg.model_config(), 2).unwrap();
    let g = model.graph();

    // Structure: video and audio leave through their fine heads, text enters the coarse space directly.
    let (d_v, d_a, d_t) = model.encoders().dims();
    assert_eq!(g.entry_head(Modality::Video, Space::Vat, d_v).unwrap().d_out, g.d_va);
    assert_eq!(g.entry_head(Modality::Audio, Space::Vat, d_a).unwrap().d_out, g.d_va);
    assert_eq!(g.entry_head(Modality::Text, Space::Vat, d_t).unwrap().d_out, g.d_vat);
    let f2c = g.fine_to_coarse().unwrap();
    assert_eq!((f2c.d_in, f2c.d_out), (g.d_va, g.d_vat));
    assert!(GraphConfig::new(Topology::Shared).fine_to_coarse().is_none());

    // Numbers: coarse = normalize(g_va->vat(raw fine)).
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (m, d) in [(Modality::Video, d_v), (Modality::Audio, d_a)] {
        let rep = Tensor::<f64>::randn([5, d], 1.0, &mut rng);
        let mut tape = Tape::inference();
        let mut fwd = Forward::new(&mut tape, &model.params, Mode::Eval);
        let x = fwd.tape.constant(rep);
        let direct = g.project(&mut fwd, x, m, Space::Vat).unwrap();
        let fine = g.project_raw(&mut fwd, x, m, Space::Va).unwrap();
        let coarse = g.coarsen(&mut fwd, fine).unwrap();
        let via = fwd.tape.l2_normalize(coarse).unwrap();
        let many = g.project_many(&mut fwd, x, m, &[Space::Va, Space::Vat]).unwrap();
        let diff = tape.value(direct).max_abs_diff(tape.value(via));
        assert!(diff < 1e-6, "{m:?}: {diff:e}");
        assert!(tape.value(many[1]).max_abs_diff(tape.value(direct)) < 1e-12);
        // Unit norm rows.
        for row in 0..5 {
            let n: f64 = tape.value(direct).row(row).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }
}
