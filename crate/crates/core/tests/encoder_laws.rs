use nextformer::config::{ChunkSpec, FrontendConfig, ModelConfig, Preset};
use nextformer::encoder::{Encoder, ForwardOptions};
use nextformer::nn::{Builder, Mode, ParamStore, Pass};
use nextformer::{RandomSource, Tensor, Var};

fn build(cfg: &ModelConfig, seed: u64) -> (Encoder, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = RandomSource::new(seed);
    let enc = Encoder::new(
        &mut Builder::new(&mut store, Some(&mut rng)),
        &cfg.name,
        &cfg.encoder,
    );
    (enc, store)
}

fn feats(t: usize, seed: u64) -> Tensor {
    Tensor::randn(&[t, 80], 1.0, &mut RandomSource::new(seed))
}

fn encode(enc: &Encoder, store: &ParamStore, x: &Tensor, opts: &ForwardOptions) -> (Tensor, usize) {
    let mut rng = RandomSource::new(0);
    let mut p = Pass::new(store, Mode::Eval, &mut rng, false).unwrap();
    let out = enc
        .forward_opts(&mut p, &Var::constant(x.clone()), opts)
        .unwrap();
    (out.h.value().clone(), out.valid)
}

fn pad(x: &Tensor, extra: usize, seed: u64) -> Tensor {
    let junk = Tensor::randn(&[extra, x.shape()[1]], 5.0, &mut RandomSource::new(seed));
    Tensor::cat_rows(&[x.clone(), junk]).unwrap()
}

#[test]
fn padded_batch_gives_bit_identical_output() {
    let configs = [
        ModelConfig::preset(Preset::NextformerXs),
        ModelConfig::preset(Preset::NextformerXs)
            .with_frontend(FrontendConfig::ConformerSubsampling {
                channels: 8,
                kernel: 3,
            })
            .with_downsample_after(None),
    ];
    for cfg in &configs {
        let (enc, store) = build(cfg, 3);
        for (t, extra) in [(37, 20), (64, 1), (50, 77)] {
            let x = feats(t, t as u64);
            let (alone, m) = encode(&enc, &store, &x, &ForwardOptions::default());
            let opts = ForwardOptions {
                chunk: None,
                valid_frames: Some(t),
            };
            let (padded, valid) = encode(&enc, &store, &pad(&x, extra, 9), &opts);
            assert_eq!(valid, m);
            assert_eq!(
                padded.slice_rows(0, valid).unwrap(),
                alone,
                "{} T={t} +{extra}",
                cfg.name
            );
        }
    }
}

#[test]
fn downsample_position_only_moves_the_rate_change() {
    let mut base = ModelConfig::preset(Preset::NextformerXs);
    base.encoder.layers = 4;
    let x = feats(90, 1);
    let mut outs = Vec::new();
    for after in 1..4 {
        let cfg = base.clone().with_downsample_after(Some(after));
        let (enc, store) = build(&cfg, 1);
        let (h, _) = encode(&enc, &store, &x, &ForwardOptions::default());
        assert_eq!(h.shape(), &[90usize.div_ceil(4) / 2, 16]);
        outs.push(h);
    }
    assert!(outs[0] != outs[1] && outs[1] != outs[2]);
}

#[test]
fn small_presets_at_ten_seconds() {
    let x = feats(1000, 2);
    let xs = ModelConfig::preset(Preset::NextformerXs);
    let (enc, store) = build(&xs, 1);
    assert_eq!(
        encode(&enc, &store, &x, &ForwardOptions::default())
            .0
            .shape(),
        &[125, 16]
    );
    assert_eq!(
        ModelConfig::preset(Preset::NextformerS)
            .encoder
            .output_frames(1000),
        125
    );
    assert_eq!(
        ModelConfig::preset(Preset::ConformerS)
            .encoder
            .output_frames(1000),
        250
    );
}

#[test]
fn s_presets_at_ten_seconds() {
    let x = feats(1000, 2);
    for (preset, m) in [(Preset::NextformerS, 125), (Preset::ConformerS, 250)] {
        let (enc, store) = build(&ModelConfig::preset(preset), 1);
        assert_eq!(
            encode(&enc, &store, &x, &ForwardOptions::default())
                .0
                .shape(),
            &[m, 256]
        );
    }
}

#[test]
fn eval_with_dynamic_chunks_is_full_attention() {
    let mut cfg = ModelConfig::preset(Preset::NextformerXs);
    cfg.encoder.chunk = ChunkSpec::Dynamic {
        full_prob: 0.0,
        max: 8,
    };
    let (enc, store) = build(&cfg, 4);
    let x = feats(60, 3);
    let dynamic = encode(&enc, &store, &x, &ForwardOptions::default()).0;
    let full = encode(
        &enc,
        &store,
        &x,
        &ForwardOptions {
            chunk: Some(ChunkSpec::Full),
            valid_frames: None,
        },
    )
    .0;
    assert_eq!(dynamic, full);
}

#[test]
fn training_draws_depend_only_on_the_seed() {
    let mut cfg = ModelConfig::preset(Preset::NextformerXs);
    cfg.encoder.chunk = ChunkSpec::Dynamic {
        full_prob: 0.5,
        max: 8,
    };
    let (enc, store) = build(&cfg, 4);
    let x = Var::constant(feats(60, 3));
    let run = |seed| {
        let mut rng = RandomSource::new(seed);
        let mut p = Pass::new(&store, Mode::Train, &mut rng, false).unwrap();
        enc.forward(&mut p, &x).unwrap().value().clone()
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}
