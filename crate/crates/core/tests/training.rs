use hogrn::checkpoint::Checkpoint;
use hogrn::evaluation::{evaluate_split, Directions, KnownFacts};
use hogrn::kgdata::{Dataset, Triple, TripleStore, Vocabulary};
use hogrn::model::{Model, Variant};
use hogrn::numcore::{DenseMatrix, Tape};
use hogrn::rng::{stream, Stream};
use hogrn::training::{batch_loss, build_queries, fit, TrainConfig};

fn five_entity_dataset() -> Dataset {
    let mut vocab = Vocabulary::new();
    for n in ["a", "b", "c", "d", "e"] {
        vocab.intern_entity(n);
    }
    vocab.intern_relation("r");
    vocab.intern_relation("s");
    let t = Triple::new;
    Dataset {
        vocab,
        store: TripleStore {
            train: vec![t(0, 0, 1), t(1, 0, 2), t(2, 0, 3), t(3, 0, 4), t(0, 1, 2), t(1, 1, 3)],
            valid: vec![t(2, 1, 4)],
            test: vec![t(4, 0, 0)],
        },
    }
}

#[test]
fn loss_falls_over_most_20_epoch_windows() {
    let data = five_entity_dataset();
    let config = TrainConfig {
        dim: 8,
        learning_rate: 0.01,
        max_epochs: 200,
        patience: 200,
        seed: 3,
        ..TrainConfig::default()
    };
    let mut losses = Vec::new();
    let outcome = fit(&data, &config, |r| losses.push(r.loss)).unwrap();
    assert_eq!(outcome.epochs_run, 200);
    let windows: Vec<bool> = losses.windows(21).map(|w| w[20] <= w[0]).collect();
    let share = windows.iter().filter(|&&ok| ok).count() as f64 / windows.len() as f64;
    assert!(share >= 0.9, "only {share:.2} of windows non-increasing");
    assert!(losses[199] < losses[0]);
}

#[test]
fn ablation_equals_full_model_with_zero_mixers() {
    let data = five_entity_dataset();
    let graph = data.extended_graph().unwrap();
    let config = |variant| TrainConfig {
        dim: 6,
        mask_ratio: 0.0,
        variant,
        ..TrainConfig::default()
    };
    let (full_cfg, abl_cfg) = (config(Variant::Full), config(Variant::WithoutReasoning));
    let mut full = Model::new(full_cfg.model_config(5, 2), &mut stream(1, Stream::Init)).unwrap();
    let ablated = Model::new(abl_cfg.model_config(5, 2), &mut stream(1, Stream::Init)).unwrap();
    // share embeddings, zero every mixer weight
    let names: Vec<String> = full.params.iter().map(|(_, p)| p.name.clone()).collect();
    for name in names {
        let id = full.params.find(&name).unwrap();
        let value = match ablated.params.find(&name) {
            Some(src) => ablated.params.value(src).clone(),
            None => {
                let (r, c) = full.params.value(id).shape();
                DenseMatrix::zeros(r, c)
            }
        };
        *full.params.value_mut(id) = value;
    }
    let queries = build_queries(&graph);
    let mut rng = stream(9, Stream::Masking);
    let masks = full.draw_masks(0.0, &mut rng).unwrap();
    for batch in queries.chunks(3) {
        let loss = |model: &Model, cfg: &TrainConfig| {
            let mut tape = Tape::new();
            let v = batch_loss(model, &model.params, &mut tape, &graph, batch, &masks, cfg).unwrap();
            tape.value(v).item()
        };
        assert_eq!(loss(&full, &full_cfg), loss(&ablated, &abl_cfg));
    }
}

#[test]
fn checkpoint_round_trip_preserves_eval_report() {
    let data = five_entity_dataset();
    let config = TrainConfig {
        dim: 8,
        learning_rate: 0.01,
        max_epochs: 5,
        seed: 4,
        ..TrainConfig::default()
    };
    let outcome = fit(&data, &config, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    Checkpoint::from_outcome(&outcome, &config, &data.vocab.fingerprint())
        .save(&path)
        .unwrap();
    let restored = Checkpoint::load(&path).unwrap().model().unwrap();

    let graph = data.extended_graph().unwrap();
    let known = KnownFacts::from_store(&data.store, 2);
    let report = |model: &Model| {
        let (states, _) = model.encode(&graph).unwrap();
        evaluate_split(&states, model.config.head, &data.store.test, &known, Directions::Both)
            .unwrap()
    };
    assert_eq!(report(&outcome.model), report(&restored));
}
