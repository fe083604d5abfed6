use reltab::dataset::{prepare, Prepared};
use reltab::synthetic::unique_join;
use reltab_core::corpus::{mask_tokens, pair_tokens, Example};
use reltab_core::encoder::EncoderConfig;
use reltab_core::rng::seeded;
use reltab_core::task::HeldOut;
use reltab_core::tensor::{ParamStore, Tape, Tensor};
use reltab_core::train::{
    batch_loss, build_model, train_relbert_j, Adam, AdamConfig, SchemeJ, TrainConfig, TrainError, TrainInputs, Variant,
};

fn toy(n: usize) -> Prepared {
    prepare(unique_join(0, n), &[], &Default::default()).unwrap()
}

fn inputs<'a>(p: &'a Prepared, held: &'a HeldOut) -> TrainInputs<'a> {
    TrainInputs { schema: &p.schema, vocabs: &p.vocabs, db: &p.db, held_out: held }
}

fn j_config(pe: usize, fe: usize) -> TrainConfig {
    TrainConfig {
        variant: Variant::J,
        encoder: EncoderConfig { d_model: 16, layers: 1, heads: 2, ff_hidden: 32, dropout: 0.0, ..Default::default() },
        adam: AdamConfig { lr: 3e-3, ..Default::default() },
        batch_size: 16,
        pretrain_epochs: pe,
        finetune_epochs: fe,
        negatives: 3,
        w2v_init: false,
        ..Default::default()
    }
}

fn scalar_store(x: f64) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.add("x", Tensor::from_fn(&[1], |_| x));
    s
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut params = scalar_store(1.0);
    let mut adam = Adam::new(AdamConfig { lr: 0.01, ..Default::default() }, 1);
    adam.step(&mut params, &[Some(Tensor::from_fn(&[1], |_| 1.0))]).unwrap();
    let x = params.get(reltab_core::tensor::ParamId(0)).data()[0];
    assert!((x - 0.99).abs() < 1e-9, "{x}");
    adam.step(&mut params, &[Some(Tensor::from_fn(&[1], |_| 1.0))]).unwrap();
    let x = params.get(reltab_core::tensor::ParamId(0)).data()[0];
    assert!((x - 0.98).abs() < 1e-9, "{x}");
}

#[test]
fn adam_zero_gradient_and_missing_gradient_leave_params() {
    let mut params = scalar_store(0.5);
    let mut adam = Adam::new(AdamConfig::default(), 1);
    adam.step(&mut params, &[Some(Tensor::zeros(&[1]))]).unwrap();
    adam.step(&mut params, &[None]).unwrap();
    assert_eq!(params.get(reltab_core::tensor::ParamId(0)).data()[0], 0.5);
    assert!(matches!(adam.step(&mut params, &[]), Err(TrainError::Config(_))));
    let bad = adam.step(&mut params, &[Some(Tensor::zeros(&[2]))]);
    assert!(matches!(bad, Err(TrainError::Shape { .. })));
}

#[test]
fn adam_is_deterministic() {
    let run = || {
        let mut params = scalar_store(0.3);
        let mut adam = Adam::new(AdamConfig { lr: 0.05, ..Default::default() }, 1);
        for i in 0..20 {
            let g = (i as f64 * 0.7).sin();
            adam.step(&mut params, &[Some(Tensor::from_fn(&[1], |_| g))]).unwrap();
        }
        params.get(reltab_core::tensor::ParamId(0)).data()[0].to_bits()
    };
    assert_eq!(run(), run());
}

#[test]
fn zero_epochs_return_the_initial_model() {
    let p = toy(12);
    let held = HeldOut::new();
    let config = j_config(0, 0);
    let out = train_relbert_j::<f64>(inputs(&p, &held), &p.schema.foreign_keys, &config, &mut |_| {}).unwrap();
    assert!(out.reports.is_empty());
    let scheme = SchemeJ::new(inputs(&p, &held), &p.schema.foreign_keys, &config).unwrap();
    let init = build_model::<f64>(inputs(&p, &held), scheme.heads.iter().copied(), &config).unwrap();
    assert_eq!(out.model.params, init.params);
}

#[test]
fn variant_j_rejects_single_table_and_wrong_variant() {
    let p = toy(8);
    let held = HeldOut::new();
    let mut single = p.schema.clone();
    single.tables.truncate(1);
    single.foreign_keys.clear();
    let one = TrainInputs { schema: &single, vocabs: &p.vocabs, db: &p.db, held_out: &held };
    let r = train_relbert_j::<f64>(one, &single.foreign_keys, &j_config(1, 1), &mut |_| {});
    assert!(matches!(r, Err(TrainError::Config(_))));
    let mut a = j_config(1, 1);
    a.variant = Variant::A;
    let r = train_relbert_j::<f64>(inputs(&p, &held), &p.schema.foreign_keys, &a, &mut |_| {});
    assert!(matches!(r, Err(TrainError::Config(_))));
}

#[test]
fn single_table_mlm_batch_leaves_other_heads_alone() {
    let p = toy(10);
    let held = HeldOut::new();
    let config = j_config(0, 0);
    let scheme = SchemeJ::new(inputs(&p, &held), &p.schema.foreign_keys, &config).unwrap();
    let model = build_model::<f64>(inputs(&p, &held), scheme.heads.iter().copied(), &config).unwrap();
    let mut rng = seeded(5);
    let examples: Vec<Example> = p.db.tables[0]
        .iter()
        .map(|r| {
            let (tokens, pos, target) = mask_tokens(&r.tokens, |c| !p.schema.is_key_column(c), &mut rng).unwrap();
            Example { tokens, target: Some((pos, target)), nsp: None }
        })
        .collect();
    let refs: Vec<&Example> = examples.iter().collect();
    let mut tape = Tape::new(&model.params);
    let loss = batch_loss(&model, &mut tape, &refs, None).unwrap().unwrap();
    let grads = tape.backward(loss.total).unwrap();
    let mut touched = 0;
    for t in 0..p.schema.tables.len() {
        for c in p.schema.table_columns(t) {
            let Some(id) = model.head_param(c) else { continue };
            let nonzero = grads.param(id).is_some_and(|g| g.data().iter().any(|&v| v != 0.0));
            if t == 0 {
                touched += nonzero as usize;
            } else {
                assert!(!nonzero, "head of column {} got a gradient", c.0);
            }
        }
    }
    assert!(touched > 0);
}

#[test]
fn trained_join_scores_positives_above_negatives() {
    let p = toy(20);
    let held = HeldOut::new();
    let mut config = j_config(5, 120);
    config.encoder = EncoderConfig { d_model: 32, layers: 2, heads: 4, ff_hidden: 128, dropout: 0.0, ..Default::default() };
    let out = train_relbert_j::<f64>(inputs(&p, &held), &p.schema.foreign_keys, &config, &mut |_| {}).unwrap();
    let (alpha, beta) = (&p.db.tables[0], &p.db.tables[1]);
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for a in alpha.iter() {
        for b in beta.iter() {
            let seq = pair_tokens(&a.tokens, &b.tokens);
            if a.tokens[0].id == b.tokens[0].id { pos.push(seq) } else { neg.push(seq) }
        }
    }
    let sigma = |v: &[Vec<_>]| {
        let refs: Vec<&[_]> = v.iter().map(|s| s.as_slice()).collect();
        let s = out.model.score_pairs(&refs).unwrap();
        s.iter().map(|x| 1.0 / (1.0 + (-x).exp())).sum::<f64>() / s.len() as f64
    };
    let (sp, sn) = (sigma(&pos), sigma(&neg));
    assert_eq!(pos.len(), 20);
    assert!(sp > sn + 0.2, "positives {sp:.3}, negatives {sn:.3}");
}
