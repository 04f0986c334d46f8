//! Finite-difference check of the speaker-conditioning parameters in a
//! small float64 model.

use mtasr::model::{Aggregation, ModelConfig, SpeakerAttributedModel};
use mtasr::stno::StnoMask;
use mtasr::tensor::{ParamGroup, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let cfg = ModelConfig {
        feature_dim: 4,
        model_dim: 8,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        ffn_dim: 16,
        num_words: 5,
        num_speakers: 2,
        num_timestamps: 6,
        window_s: 1.0,
        aggregation: Aggregation::Concatenation,
        max_frames: 5,
        max_tokens: 12,
        conv_width: 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = SpeakerAttributedModel::<f64>::new(cfg, 0).unwrap();
    for (_, p) in model.params.iter_mut() {
        if p.group == ParamGroup::New {
            p.value.data_mut().iter_mut().for_each(|x| *x += rng.gen_range(-0.3..0.3));
        }
    }
    let x = Tensor::matrix(10, 4, (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let masks: Vec<StnoMask> = (0..2)
        .map(|u| StnoMask {
            speaker_index: u,
            probs: (0..5)
                .map(|_| {
                    let p: [f64; 4] = std::array::from_fn(|_| rng.gen_range(0.1..1.0));
                    let s: f64 = p.iter().sum();
                    p.map(|v| v / s)
                })
                .collect(),
            frame_duration_s: 0.2,
        })
        .collect();
    let v = model.vocabulary();
    let tokens = [v.prompt(), vec![v.speaker_time_id(0, 0), 1, 2, v.speaker_time_id(0, 3)]].concat();
    let mut targets = tokens[1..].to_vec();
    targets.push(v.eos());
    let weights: Vec<f64> = targets.iter().map(|&t| if v.is_speaker_time(t) { 5.0 } else { 1.0 }).collect();

    let loss = |m: &SpeakerAttributedModel<f64>| {
        let tape = Tape::new();
        let (_, dec) = m.forward(&tape, &x, &masks, &tokens).unwrap();
        let l = tape.softmax_cross_entropy(dec.logits, &targets, &weights).unwrap();
        let value = tape.value(l).data()[0];
        (value, tape.backward(l).params().map(|(id, g)| (id, g.to_vec())).collect::<Vec<_>>())
    };
    let (_, grads) = loss(&model);
    let h = 1e-6;
    for (id, g) in grads {
        let name = model.params.get(id).name.clone();
        if model.params.get(id).group != ParamGroup::New {
            continue;
        }
        let mut worst: f64 = 0.0;
        for j in 0..g.len().min(4) {
            model.params.get_mut(id).value.data_mut()[j] += h;
            let up = loss(&model).0;
            model.params.get_mut(id).value.data_mut()[j] -= 2.0 * h;
            let down = loss(&model).0;
            model.params.get_mut(id).value.data_mut()[j] += h;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max((numeric - g[j]).abs() / numeric.abs().max(g[j].abs()).max(1e-3));
        }
        println!("{name:<24} max rel err {worst:.2e}");
    }
}
