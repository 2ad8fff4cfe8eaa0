//! End-to-end behaviour on a small synthetic world with the mock LLM.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use causalx_core::llm::MockLlm;
use causalx_core::pipeline::{self, fit, Fitted};
use causalx_core::synth::{self, INTEREST_KEYWORDS};
use causalx_core::{what_if, ExplanationStore, Gateway, PipelineConfig};

fn config() -> PipelineConfig {
    PipelineConfig {
        seed: 21,
        mock_llm: true,
        world_users: 150,
        world_items: 500,
        epochs: 4,
        ..PipelineConfig::default()
    }
}

struct Shared {
    cfg: PipelineConfig,
    gateway: Gateway,
    fitted: Fitted,
}

fn shared() -> &'static Shared {
    static CELL: OnceLock<Shared> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = config();
        let (ds, _) = synth::generate(&cfg.world_config()).unwrap();
        let gateway = cfg.gateway().unwrap();
        let fitted = fit(&cfg, ds, &gateway).unwrap();
        Shared { cfg, gateway, fitted }
    })
}

#[test]
fn augmented_samples_use_candidate_explanations_only() {
    let s = shared();
    let g = s.fitted.store.candidates.len();
    assert_eq!(s.fitted.model.num_explanations(), g);
    let aug = s.fitted.store.augmented(&s.fitted.prep.train).unwrap();
    assert!(!aug.is_empty());
    assert!(aug.iter().all(|a| a.expl < g));
    // Every representative is reachable from at least one interaction.
    let used: BTreeSet<usize> = aug.iter().map(|a| a.expl).collect();
    assert_eq!(used.len(), g);
}

#[test]
fn effects_decompose_exactly_up_to_rounding() {
    let s = shared();
    let model = &s.fitted.model;
    for ep in s.fitted.prep.episodes.iter().take(20) {
        for item in &ep.candidates[..5] {
            let n = s.fitted.prep.popularity.score_of(item);
            for e in 0..model.num_explanations().min(4) {
                let d = model.effect_decomposition(&ep.user, item, n, e).unwrap();
                assert!((d.total - (d.matching + d.popularity_direct)).abs() < 1e-6, "{d:?}");
            }
        }
    }
}

#[test]
fn store_is_deterministic_and_warm_cache_skips_the_backend() {
    let s = shared();
    let before = s.gateway.backend_calls();
    let (again, _) = pipeline::explanation_store(&s.cfg, &s.fitted.prep, &s.gateway).unwrap();
    assert_eq!(s.gateway.backend_calls(), before, "warm cache must not reach the backend");
    assert_eq!(again, s.fitted.store);

    let dir = tempfile::tempdir().unwrap();
    s.fitted.store.save(dir.path()).unwrap();
    assert_eq!(ExplanationStore::load(dir.path()).unwrap(), s.fitted.store);
}

#[test]
fn unrelated_explanations_move_items() {
    let s = shared();
    let mut total = 0.0;
    let mut n = 0;
    for (k, ep) in s.fitted.prep.episodes.iter().take(40).enumerate() {
        let kw = INTEREST_KEYWORDS[k % INTEREST_KEYWORDS.len()];
        let overrides = vec![format!("Drawn to {}, {} and {}.", kw[0], kw[1], kw[2])];
        let w = what_if(
            &s.fitted.model,
            &s.fitted.prep.full,
            &s.gateway,
            &s.fitted.prep.popularity,
            &s.fitted.store.candidates,
            ep,
            s.cfg.beta,
            s.cfg.n_explanations,
            &overrides,
        )
        .unwrap();
        assert!(w.original.is_permutation() && w.modified.is_permutation());
        total += w.trajectory.mean_displacement;
        n += 1;
    }
    assert!(total / n as f64 > 0.0);
}

#[test]
fn recommendations_are_pure_given_inputs() {
    let s = shared();
    let run = || {
        pipeline::rank_variant(
            &s.cfg,
            &s.fitted.prep,
            &s.fitted.parts,
            &s.fitted.store,
            &s.gateway,
            pipeline::Variant::Full { beta: s.cfg.beta },
        )
        .unwrap()
    };
    let a = run();
    assert!(a.iter().all(|r| r.is_permutation()));
    assert_eq!(a, run());
}

#[test]
fn mock_llm_depends_on_prompt_and_seed_only() {
    let prompt = "Rank the candidates.\n1. Alpha (genre: jazz)\n2. Beta (genre: rock)";
    assert_eq!(MockLlm::new(3).respond(prompt), MockLlm::new(3).respond(prompt));
}
