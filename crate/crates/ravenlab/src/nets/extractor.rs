//! Convolutional feature extractors. Video: 3-D stem (stride 1x2x2), spatial
//! max-pool, four 2-D residual stages, global spatial average pool — one
//! embedding per frame. Audio: strided 1-D conv, four 1-D residual stages,
//! average pool of stride 20 — total stride 4*2*2*2*20 = 640, i.e. 25 fps.
//!
//! Normalization inside the extractors is batchnorm with statistics over all
//! non-channel positions of the current sample (clips are processed
//! unpadded, one at a time); running averages serve eval mode.

use super::{EncoderConfig, ForwardState, Modality};
use crate::tensor::{BoundParams, Tape, Tensor, Var};

fn extractor_norm(
    tape: &mut Tape,
    x: Var,
    name: &str,
    bound: &BoundParams,
    state: &mut ForwardState,
) -> Var {
    // Reshape (.., C) activations to rows over positions.
    let shape = tape.shape(x).to_vec();
    let c = *shape.last().unwrap();
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let flat = tape.reshape(x, &[rows, c]);
    let gain = bound.var(&format!("{name}.g"));
    let bias = bound.var(&format!("{name}.b"));
    let out = if state.train {
        let (y, mean, var) = tape.batchnorm_rows_train(flat, gain, bias, None);
        state.bn_updates.push((name.to_string(), mean, var));
        y
    } else {
        let rm = bound.store().get(&format!("{name}.rm")).clone();
        let rv = bound.store().get(&format!("{name}.rv")).clone();
        tape.batchnorm_rows_eval(flat, gain, bias, &rm, &rv)
    };
    tape.reshape(out, &shape)
}

fn zero_bias(tape: &mut Tape, c: usize) -> Var {
    tape.constant(Tensor::zeros(&[c]))
}

/// One 2-D residual basic block (channels-last frames batch).
fn res_block_2d(
    tape: &mut Tape,
    x: Var,
    prefix: &str,
    stride: usize,
    bound: &BoundParams,
    state: &mut ForwardState,
) -> Var {
    let w1 = bound.var(&format!("{prefix}.conv1.w"));
    let cout = tape.shape(w1)[3];
    let b0 = zero_bias(tape, cout);
    let h = tape.conv2d(x, w1, b0, stride, 1);
    let h = extractor_norm(tape, h, &format!("{prefix}.norm1"), bound, state);
    let h = tape.relu(h);
    let w2 = bound.var(&format!("{prefix}.conv2.w"));
    let b0 = zero_bias(tape, cout);
    let h = tape.conv2d(h, w2, b0, 1, 1);
    let h = extractor_norm(tape, h, &format!("{prefix}.norm2"), bound, state);
    let skip = if bound.store().contains(&format!("{prefix}.down.w")) {
        let wd = bound.var(&format!("{prefix}.down.w"));
        let b0 = zero_bias(tape, cout);
        let s = tape.conv2d(x, wd, b0, stride, 0);
        extractor_norm(tape, s, &format!("{prefix}.down_norm"), bound, state)
    } else {
        x
    };
    let sum = tape.add(h, skip);
    tape.relu(sum)
}

fn res_block_1d(
    tape: &mut Tape,
    x: Var,
    prefix: &str,
    stride: usize,
    bound: &BoundParams,
    state: &mut ForwardState,
) -> Var {
    let w1 = bound.var(&format!("{prefix}.conv1.w"));
    let cout = tape.shape(w1)[2];
    let b0 = zero_bias(tape, cout);
    let h = tape.conv1d(x, w1, b0, stride, 1);
    let h = extractor_norm(tape, h, &format!("{prefix}.norm1"), bound, state);
    let h = tape.relu(h);
    let w2 = bound.var(&format!("{prefix}.conv2.w"));
    let b0 = zero_bias(tape, cout);
    let h = tape.conv1d(h, w2, b0, 1, 1);
    let h = extractor_norm(tape, h, &format!("{prefix}.norm2"), bound, state);
    let skip = if bound.store().contains(&format!("{prefix}.down.w")) {
        let wd = bound.var(&format!("{prefix}.down.w"));
        let b0 = zero_bias(tape, cout);
        let s = tape.conv1d(x, wd, b0, stride, 0);
        extractor_norm(tape, s, &format!("{prefix}.down_norm"), bound, state)
    } else {
        x
    };
    let sum = tape.add(h, skip);
    tape.relu(sum)
}

/// (T, H, W) masked clip -> (T, C) per-frame embeddings. Temporal length is
/// preserved throughout; spatial dims collapse in the global average pool.
pub fn video_extract(
    tape: &mut Tape,
    clip: Var,
    prefix: &str,
    cfg: &EncoderConfig,
    bound: &BoundParams,
    state: &mut ForwardState,
) -> Var {
    assert_eq!(cfg.modality, Modality::Video);
    let shape = tape.shape(clip).to_vec();
    assert_eq!(shape.len(), 3, "video_extract expects (T, H, W)");
    assert_eq!(shape[1], shape[2], "frames must be square");
    let p = |s: &str| format!("{prefix}{s}");
    let stem_w = bound.var(&p("extractor.stem.w"));
    let b0 = zero_bias(tape, cfg.widths[0]);
    let mut x = tape.conv3d_stem(clip, stem_w, b0, 2);
    x = extractor_norm(tape, x, &p("extractor.stem.norm"), bound, state);
    x = tape.relu(x);
    x = tape.maxpool2d(x);
    for stage in 0..4 {
        let stride = if stage == 0 { 1 } else { 2 };
        for block in 0..2 {
            let bp = p(&format!("extractor.stage{stage}.block{block}"));
            let bs = if block == 0 { stride } else { 1 };
            x = res_block_2d(tape, x, &bp, bs, bound, state);
        }
    }
    tape.global_avg_spatial(x)
}

/// (N,) masked waveform (N divisible by 640) -> (N / 640, C) embeddings.
pub fn audio_extract(
    tape: &mut Tape,
    wave: Var,
    prefix: &str,
    cfg: &EncoderConfig,
    bound: &BoundParams,
    state: &mut ForwardState,
) -> Var {
    assert_eq!(cfg.modality, Modality::Audio);
    let n = tape.value(wave).numel();
    assert!(n > 0, "empty waveform");
    assert_eq!(n % 640, 0, "waveform length must be a multiple of 640");
    let p = |s: &str| format!("{prefix}{s}");
    let x = tape.reshape(wave, &[n, 1]);
    let stem_w = bound.var(&p("extractor.stem.w"));
    let b0 = zero_bias(tape, cfg.widths[0]);
    // k=80, stride 4, pad 38 keeps the length at exactly N/4.
    let mut x = tape.conv1d(x, stem_w, b0, 4, 38);
    x = extractor_norm(tape, x, &p("extractor.stem.norm"), bound, state);
    x = tape.relu(x);
    for stage in 0..4 {
        let stride = if stage == 0 { 1 } else { 2 };
        for block in 0..2 {
            let bp = p(&format!("extractor.stage{stage}.block{block}"));
            let bs = if block == 0 { stride } else { 1 };
            x = res_block_1d(tape, x, &bp, bs, bound, state);
        }
    }
    tape.avgpool1d(x, 20)
}

/// Receptive field of one output frame of the audio extractor, in samples.
/// Used by the shift-equivariance test to pick its interior margin.
pub fn audio_extractor_receptive_field() -> usize {
    let mut rf = 1usize;
    let mut jump = 1usize;
    let mut layer = |k: usize, s: usize, rf: &mut usize, jump: &mut usize| {
        *rf += (k - 1) * *jump;
        *jump *= s;
    };
    layer(80, 4, &mut rf, &mut jump);
    for stage in 0..4 {
        for block in 0..2 {
            let s = if stage > 0 && block == 0 { 2 } else { 1 };
            layer(3, s, &mut rf, &mut jump);
            layer(3, 1, &mut rf, &mut jump);
        }
    }
    layer(20, 20, &mut rf, &mut jump);
    rf
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{register_encoder, ModelBundle};
    use crate::rng::rng_for;
    use crate::tensor::ParamStore;

    fn forward_video(cfg: &EncoderConfig, t: usize, hw: usize) -> Vec<usize> {
        let bundle = ModelBundle::new_encoder(cfg.clone(), 5).unwrap();
        let mut tape = Tape::no_grad();
        let bound = crate::tensor::BoundParams::bind(&bundle.params, &mut tape, false);
        let clip = tape.constant(Tensor::full(&[t, hw, hw], 0.3));
        let mut state = ForwardState::eval();
        let out = video_extract(&mut tape, clip, "", cfg, &bound, &mut state);
        tape.shape(out).to_vec()
    }

    #[test]
    fn paper_width_video_extractor_shape() {
        let cfg = EncoderConfig { modality: Modality::Video, ..Default::default() };
        assert_eq!(forward_video(&cfg, 5, 88), vec![5, 512]);
    }

    #[test]
    fn single_frame_passes_through() {
        let cfg = EncoderConfig {
            modality: Modality::Video,
            widths: [4, 4, 8, 8, 16],
            blocks: 1,
            hidden: 16,
            mlp: 32,
            heads: 2,
            ..Default::default()
        };
        assert_eq!(forward_video(&cfg, 1, 32), vec![1, 16]);
    }

    #[test]
    fn toy_width_chain_traced_by_hand() {
        // 32 -> stem(s2) 16 -> pool 8 -> stages 8, 4, 2, 1 -> global pool.
        let cfg = EncoderConfig {
            modality: Modality::Video,
            widths: [8, 8, 16, 32, 64],
            blocks: 1,
            hidden: 64,
            mlp: 64,
            heads: 2,
            ..Default::default()
        };
        assert_eq!(forward_video(&cfg, 4, 32), vec![4, 64]);
    }

    fn forward_audio(cfg: &EncoderConfig, n: usize) -> Vec<usize> {
        let mut params = ParamStore::new();
        let mut rng = rng_for(6, "t", &[]);
        register_encoder(&mut params, "", cfg, &mut rng);
        let mut tape = Tape::no_grad();
        let bound = crate::tensor::BoundParams::bind(&params, &mut tape, false);
        let wave = tape.constant(Tensor::full(&[n], 0.1));
        let mut state = ForwardState::eval();
        let out = audio_extract(&mut tape, wave, "", cfg, &bound, &mut state);
        tape.shape(out).to_vec()
    }

    #[test]
    fn audio_stride_chain_is_640() {
        let cfg = EncoderConfig {
            modality: Modality::Audio,
            widths: [4, 4, 8, 8, 16],
            blocks: 1,
            hidden: 16,
            mlp: 32,
            heads: 2,
            ..Default::default()
        };
        assert_eq!(forward_audio(&cfg, 12_800), vec![20, 16]); // 0.8 s
        assert_eq!(forward_audio(&cfg, 1_920), vec![3, 16]);
        assert_eq!(forward_audio(&cfg, 640), vec![1, 16]);
    }
}
