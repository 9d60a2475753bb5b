//! Length-bucketed batching: sort by duration to minimise zero-padding,
//! shuffle equal-length groups per epoch, then pack greedily under a
//! seconds budget.

use rand::seq::SliceRandom;

use super::ManifestEntry;
use crate::error::{RavenError, Result};
use crate::rng::rng_for;

/// Returns batches of indices into `entries`. Every entry appears exactly
/// once; each batch's summed duration stays within `budget_s`.
pub fn batch_iter(
    entries: &[ManifestEntry],
    budget_s: f64,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>> {
    if entries.is_empty() {
        return Ok(Vec::new());
    }
    let longest = entries.iter().map(|e| e.duration_s).fold(0.0, f64::max);
    if longest > budget_s {
        return Err(RavenError::config(format!(
            "batch budget {budget_s} s below longest sample {longest} s"
        )));
    }
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by(|a, b| {
        entries[*a]
            .duration_s
            .partial_cmp(&entries[*b].duration_s)
            .unwrap()
            .then_with(|| entries[*a].id.cmp(&entries[*b].id))
    });
    // Shuffle within runs of equal duration.
    let mut rng = rng_for(seed, "batch-epoch", &[epoch]);
    let mut start = 0;
    while start < order.len() {
        let d = entries[order[start]].duration_s;
        let mut end = start + 1;
        while end < order.len() && entries[order[end]].duration_s == d {
            end += 1;
        }
        order[start..end].shuffle(&mut rng);
        start = end;
    }
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut current_s = 0.0;
    for ix in order {
        let d = entries[ix].duration_s;
        if !current.is_empty() && current_s + d > budget_s {
            batches.push(std::mem::take(&mut current));
            current_s = 0.0;
        }
        current.push(ix);
        current_s += d;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Split;

    fn entry(id: &str, duration_s: f64) -> ManifestEntry {
        ManifestEntry {
            id: id.to_string(),
            split: Split::FinetuneLabelled,
            video_path: String::new(),
            audio_path: String::new(),
            transcript: Some("a".to_string()),
            duration_s,
        }
    }

    #[test]
    fn partitions_exactly_and_respects_budget() {
        let entries: Vec<ManifestEntry> = (0..20)
            .map(|i| entry(&format!("e{i:02}"), 0.4 + 0.2 * (i % 5) as f64))
            .collect();
        let batches = batch_iter(&entries, 2.0, 3, 0).unwrap();
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..20).collect::<Vec<_>>());
        for b in &batches {
            let total: f64 = b.iter().map(|ix| entries[*ix].duration_s).sum();
            assert!(total <= 2.0 + 1e-9);
        }
    }

    #[test]
    fn single_sample_is_one_batch() {
        let entries = vec![entry("only", 1.0)];
        let batches = batch_iter(&entries, 4.0, 1, 0).unwrap();
        assert_eq!(batches, vec![vec![0]]);
    }

    #[test]
    fn oversized_sample_is_an_error() {
        let entries = vec![entry("big", 5.0)];
        assert!(batch_iter(&entries, 4.0, 1, 0).is_err());
    }

    #[test]
    fn epochs_reshuffle_within_equal_lengths() {
        let entries: Vec<ManifestEntry> =
            (0..16).map(|i| entry(&format!("e{i:02}"), 1.0)).collect();
        let e0: Vec<Vec<usize>> = batch_iter(&entries, 3.0, 9, 0).unwrap();
        let e1: Vec<Vec<usize>> = batch_iter(&entries, 3.0, 9, 1).unwrap();
        assert_ne!(e0, e1, "orders should differ across epochs");
        let mut s0: Vec<usize> = e0.into_iter().flatten().collect();
        let mut s1: Vec<usize> = e1.into_iter().flatten().collect();
        s0.sort_unstable();
        s1.sort_unstable();
        assert_eq!(s0, s1, "same multiset across epochs");
    }
}
