//! Synchronized temporal masking. Video frames are sampled independently as
//! span starts; the audio mask is the video mask dilated by exactly 640.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::SAMPLES_PER_FRAME;
use crate::error::{RavenError, Result};
use crate::rng::rng_for;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingConfig {
    pub prob: f64,
    pub len: usize,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig { prob: 0.2, len: 3 }
    }
}

/// Per-sample mask: start indices, the derived per-frame booleans, and the
/// 640x dilated audio-sample booleans.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub video_start_indices: Vec<usize>,
    pub video_masked: Vec<bool>,
    pub audio_masked: Vec<bool>,
    pub mask_prob: f64,
    pub mask_len_frames: usize,
}

impl MaskPlan {
    pub fn empty(t: usize) -> Self {
        MaskPlan {
            video_start_indices: Vec::new(),
            video_masked: vec![false; t],
            audio_masked: vec![false; t * SAMPLES_PER_FRAME],
            mask_prob: 0.0,
            mask_len_frames: 1,
        }
    }

    pub fn frames(&self) -> usize {
        self.video_masked.len()
    }

    /// Feature-frame indices covered by the mask (the index set the
    /// within-modal loss sums over; features run at the video frame rate).
    pub fn masked_frames(&self) -> Vec<usize> {
        self.video_masked
            .iter()
            .enumerate()
            .filter(|(_, m)| **m)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn masked_frame_count(&self) -> usize {
        self.video_masked.iter().filter(|m| **m).count()
    }
}

/// Samples a mask: each frame is independently a span start with
/// `cfg.prob`; a start covers that frame plus the next `cfg.len - 1`
/// (spans merge and clamp at the sequence end).
pub fn sample_mask(t: usize, cfg: &MaskingConfig, seed: u64) -> Result<MaskPlan> {
    if t == 0 {
        return Err(RavenError::shape("cannot mask a zero-length clip"));
    }
    if !(0.0..=1.0).contains(&cfg.prob) {
        return Err(RavenError::config("mask probability must be in [0, 1]"));
    }
    if cfg.len == 0 {
        return Err(RavenError::config("mask length must be at least 1 frame"));
    }
    let mut rng = rng_for(seed, "mask", &[t as u64]);
    let mut starts = Vec::new();
    let mut video_masked = vec![false; t];
    for i in 0..t {
        if rng.gen_range(0.0..1.0) < cfg.prob {
            starts.push(i);
            for frame in video_masked.iter_mut().skip(i).take(cfg.len) {
                *frame = true;
            }
        }
    }
    let mut audio_masked = vec![false; t * SAMPLES_PER_FRAME];
    for (i, m) in video_masked.iter().enumerate() {
        if *m {
            for a in audio_masked
                .iter_mut()
                .skip(i * SAMPLES_PER_FRAME)
                .take(SAMPLES_PER_FRAME)
            {
                *a = true;
            }
        }
    }
    Ok(MaskPlan {
        video_start_indices: starts,
        video_masked,
        audio_masked,
        mask_prob: cfg.prob,
        mask_len_frames: cfg.len,
    })
}

/// Zeroes the masked video frames / audio spans. Unmasked content is passed
/// through bit-identically.
pub fn apply_mask(
    video: &[f64],
    frame_len: usize,
    audio: &[f64],
    plan: &MaskPlan,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let t = plan.video_masked.len();
    if video.len() != t * frame_len {
        return Err(RavenError::shape(format!(
            "video length {} does not match {t} frames of {frame_len}",
            video.len()
        )));
    }
    if audio.len() != plan.audio_masked.len() {
        return Err(RavenError::shape(format!(
            "audio length {} does not match plan length {}",
            audio.len(),
            plan.audio_masked.len()
        )));
    }
    let mut mv = video.to_vec();
    for (i, m) in plan.video_masked.iter().enumerate() {
        if *m {
            for v in mv[i * frame_len..(i + 1) * frame_len].iter_mut() {
                *v = 0.0;
            }
        }
    }
    let mut ma = audio.to_vec();
    for (a, m) in ma.iter_mut().zip(&plan.audio_masked) {
        if *m {
            *a = 0.0;
        }
    }
    Ok((mv, ma))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prob_zero_masks_nothing() {
        let plan = sample_mask(10, &MaskingConfig { prob: 0.0, len: 3 }, 1).unwrap();
        assert!(plan.video_start_indices.is_empty());
        assert!(plan.video_masked.iter().all(|m| !m));
    }

    #[test]
    fn prob_one_masks_everything() {
        let plan = sample_mask(10, &MaskingConfig { prob: 1.0, len: 3 }, 1).unwrap();
        assert!(plan.video_masked.iter().all(|m| *m));
        assert!(plan.audio_masked.iter().all(|m| *m));
    }

    #[test]
    fn dilation_is_exactly_640x() {
        let plan = sample_mask(40, &MaskingConfig::default(), 77).unwrap();
        for (j, m) in plan.audio_masked.iter().enumerate() {
            assert_eq!(*m, plan.video_masked[j / SAMPLES_PER_FRAME]);
        }
    }

    #[test]
    fn one_start_of_three_frames_zeroes_1920_audio_samples() {
        let t = 10;
        let mut plan = MaskPlan::empty(t);
        plan.mask_len_frames = 3;
        plan.video_start_indices = vec![2];
        for i in 2..5 {
            plan.video_masked[i] = true;
        }
        for j in 2 * SAMPLES_PER_FRAME..5 * SAMPLES_PER_FRAME {
            plan.audio_masked[j] = true;
        }
        let video: Vec<f64> = (0..t * 4).map(|i| i as f64 + 1.0).collect();
        let audio: Vec<f64> = (0..t * SAMPLES_PER_FRAME).map(|i| i as f64 + 1.0).collect();
        let (mv, ma) = apply_mask(&video, 4, &audio, &plan).unwrap();
        let zeroed = ma.iter().filter(|v| **v == 0.0).count();
        assert_eq!(zeroed, 1920);
        assert!(ma[2 * 640..5 * 640].iter().all(|v| *v == 0.0));
        assert!(mv[2 * 4..5 * 4].iter().all(|v| *v == 0.0));
        // Unmasked content untouched.
        assert_eq!(&mv[..8], &video[..8]);
        assert_eq!(&ma[..2 * 640], &audio[..2 * 640]);
    }

    #[test]
    fn apply_mask_is_idempotent() {
        let plan = sample_mask(12, &MaskingConfig::default(), 5).unwrap();
        let video: Vec<f64> = (0..12 * 4).map(|i| i as f64 * 0.1).collect();
        let audio: Vec<f64> = (0..12 * SAMPLES_PER_FRAME).map(|i| (i as f64 * 0.01).sin()).collect();
        let (v1, a1) = apply_mask(&video, 4, &audio, &plan).unwrap();
        let (v2, a2) = apply_mask(&v1, 4, &a1, &plan).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(a1, a2);
    }

    #[test]
    fn empty_plan_is_identity_and_full_plan_zeroes() {
        let t = 6;
        let video: Vec<f64> = (0..t * 4).map(|i| i as f64).collect();
        let audio: Vec<f64> = (0..t * SAMPLES_PER_FRAME).map(|i| i as f64).collect();
        let empty = MaskPlan::empty(t);
        let (v, a) = apply_mask(&video, 4, &audio, &empty).unwrap();
        assert_eq!(v, video);
        assert_eq!(a, audio);
        let full = sample_mask(t, &MaskingConfig { prob: 1.0, len: 1 }, 2).unwrap();
        let (v, a) = apply_mask(&video, 4, &audio, &full).unwrap();
        assert!(v.iter().skip(1).all(|x| *x == 0.0));
        assert!(a.iter().skip(1).all(|x| *x == 0.0));
    }

    #[test]
    fn interior_masked_fraction_matches_analytic_value() {
        // P(masked) = 1 - (1-p)^len = 0.488 for p=0.2, len=3.
        let cfg = MaskingConfig { prob: 0.2, len: 3 };
        let mut masked = 0usize;
        let mut total = 0usize;
        let t = 103;
        for seed in 0..1000u64 {
            let plan = sample_mask(t, &cfg, seed).unwrap();
            for i in (cfg.len - 1)..t {
                total += 1;
                if plan.video_masked[i] {
                    masked += 1;
                }
            }
        }
        assert!(total >= 100_000);
        let frac = masked as f64 / total as f64;
        assert!((frac - 0.488).abs() < 0.01, "fraction {frac}");
    }

    #[test]
    fn mean_start_count_is_binomial() {
        let cfg = MaskingConfig { prob: 0.2, len: 3 };
        let t = 50;
        let trials = 2000;
        let mut count = 0usize;
        for seed in 0..trials {
            count += sample_mask(t, &cfg, seed as u64).unwrap().video_start_indices.len();
        }
        let mean = count as f64 / trials as f64;
        let expect = t as f64 * cfg.prob;
        let sigma = (t as f64 * cfg.prob * (1.0 - cfg.prob) / trials as f64).sqrt();
        assert!((mean - expect).abs() < 3.0 * sigma, "mean {mean} vs {expect}");
    }
}
