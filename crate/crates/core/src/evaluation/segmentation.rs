//! KNN patch segmentation against a bank of per-image class centroids.

use crate::autodiff::cosine;
use crate::error::{Error, Result};
use crate::interchange::{FeatureMap, LabelMap, IGNORE_LABEL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Metric {
    #[default]
    Cosine,
    /// Negative Euclidean distance.
    L2,
}

impl Metric {
    pub fn similarity(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Cosine => cosine(a, b).0,
            Metric::L2 => -a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegMemoryBank {
    pub entries: Vec<(u16, Vec<f64>)>,
    pub metric: Metric,
}

/// One centroid per (image, class present in that image).
pub fn build_memory_bank(train: &[(FeatureMap, LabelMap)], metric: Metric) -> Result<SegMemoryBank> {
    let mut entries = Vec::new();
    for (n, (f, l)) in train.iter().enumerate() {
        if (f.grid_h, f.grid_w) != (l.grid_h, l.grid_w) {
            return Err(Error::contract(
                "build_memory_bank",
                format!(
                    "pair {n}: features {}x{} but labels {}x{}",
                    f.grid_h, f.grid_w, l.grid_h, l.grid_w
                ),
            ));
        }
        let c = f.channels;
        let mut classes: Vec<u16> = l.labels.iter().copied().filter(|&c| c != IGNORE_LABEL).collect();
        classes.sort_unstable();
        classes.dedup();
        for cls in classes {
            let mut sum = vec![0.0; c];
            let mut count = 0usize;
            for (p, _) in l.labels.iter().enumerate().filter(|(_, &x)| x == cls) {
                for (s, &v) in sum.iter_mut().zip(f.row(p)) {
                    *s += v as f64;
                }
                count += 1;
            }
            sum.iter_mut().for_each(|s| *s /= count as f64);
            entries.push((cls, sum));
        }
    }
    if entries.is_empty() {
        return Err(Error::contract("build_memory_bank", "no labeled patches in any image"));
    }
    Ok(SegMemoryBank { entries, metric })
}

/// Majority vote among the `k` most similar bank entries per patch. Ties go
/// to the class with the larger summed similarity, then the lower class id.
pub fn knn_segment(bank: &SegMemoryBank, features: &FeatureMap, k: usize) -> Result<LabelMap> {
    if bank.entries.is_empty() || k == 0 {
        return Err(Error::contract("knn_segment", "empty bank or k = 0"));
    }
    if let Some((_, e)) = bank.entries.iter().find(|(_, e)| e.len() != features.channels) {
        return Err(Error::contract(
            "knn_segment",
            format!("bank has {} channels, features have {}", e.len(), features.channels),
        ));
    }
    let k = k.min(bank.entries.len());
    let mut labels = Vec::with_capacity(features.n_patches());
    let mut sims: Vec<(f64, usize)> = Vec::with_capacity(bank.entries.len());
    for p in 0..features.n_patches() {
        let q: Vec<f64> = features.row(p).iter().map(|&v| v as f64).collect();
        sims.clear();
        sims.extend(
            bank.entries
                .iter()
                .enumerate()
                .map(|(i, (_, e))| (bank.metric.similarity(&q, e), i)),
        );
        // stable: equal similarities keep bank order
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        labels.push(vote(sims[..k].iter().map(|&(s, i)| (bank.entries[i].0, s))));
    }
    LabelMap::new(features.grid_h, features.grid_w, labels)
}

fn vote(neighbours: impl Iterator<Item = (u16, f64)>) -> u16 {
    let mut tally: Vec<(u16, usize, f64)> = Vec::new();
    for (cls, s) in neighbours {
        match tally.iter_mut().find(|t| t.0 == cls) {
            Some(t) => {
                t.1 += 1;
                t.2 += s;
            }
            None => tally.push((cls, 1, s)),
        }
    }
    tally
        .into_iter()
        .max_by(|a, b| {
            a.1.cmp(&b.1)
                .then(a.2.total_cmp(&b.2))
                .then(b.0.cmp(&a.0))
        })
        .map(|t| t.0)
        .expect("k >= 1")
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiouReport {
    pub miou: f64,
    /// IoU per class id; `None` for classes absent from the ground truth.
    pub per_class: Vec<Option<f64>>,
}

/// Mean IoU over classes present in `gt`, skipping ignored patches.
pub fn miou(pred: &LabelMap, gt: &LabelMap, n_classes: usize) -> Result<MiouReport> {
    if (pred.grid_h, pred.grid_w) != (gt.grid_h, gt.grid_w) {
        return Err(Error::contract(
            "miou",
            format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.grid_h, pred.grid_w, gt.grid_h, gt.grid_w
            ),
        ));
    }
    let mut inter = vec![0usize; n_classes];
    let mut pred_n = vec![0usize; n_classes];
    let mut gt_n = vec![0usize; n_classes];
    let mut any = false;
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        if g == IGNORE_LABEL {
            continue;
        }
        any = true;
        let (p, g) = (p as usize, g as usize);
        if g < n_classes {
            gt_n[g] += 1;
        }
        if p < n_classes {
            pred_n[p] += 1;
        }
        if p == g && g < n_classes {
            inter[g] += 1;
        }
    }
    if !any {
        return Err(Error::contract("miou", "every patch is ignored"));
    }
    let per_class: Vec<Option<f64>> = (0..n_classes)
        .map(|c| {
            (gt_n[c] > 0).then(|| inter[c] as f64 / (pred_n[c] + gt_n[c] - inter[c]) as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(MiouReport { miou, per_class })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lm(h: usize, w: usize, l: &[u16]) -> LabelMap {
        LabelMap::new(h, w, l.to_vec()).unwrap()
    }

    #[test]
    fn miou_hand_cases() {
        let gt = lm(2, 2, &[0, 0, 1, 1]);
        assert_eq!(miou(&gt, &gt, 2).unwrap().miou, 1.0);
        let a = lm(2, 2, &[0, 0, 0, 0]);
        let b = lm(2, 2, &[1, 1, 1, 1]);
        assert_eq!(miou(&a, &b, 2).unwrap().miou, 0.0);
        // one gt class, two patches right, two predicted as an absent class
        let gt = lm(2, 2, &[0, 0, 0, 0]);
        let pred = lm(2, 2, &[0, 0, 1, 1]);
        let r = miou(&pred, &gt, 2).unwrap();
        assert_eq!(r.miou, 0.5);
        assert_eq!(r.per_class, vec![Some(0.5), None]);
    }

    #[test]
    fn miou_ignores_sentinel() {
        let gt = lm(1, 3, &[0, IGNORE_LABEL, 1]);
        let pred = lm(1, 3, &[0, 1, 1]);
        assert_eq!(miou(&pred, &gt, 2).unwrap().miou, 1.0);
        let all = lm(1, 2, &[IGNORE_LABEL, IGNORE_LABEL]);
        assert!(miou(&lm(1, 2, &[0, 0]), &all, 2).is_err());
    }

    #[test]
    fn bank_centroids() {
        let f = FeatureMap::new(1, 3, 2, vec![1.0, 0.0, 3.0, 2.0, 9.0, 9.0]).unwrap();
        let l = lm(1, 3, &[4, 4, IGNORE_LABEL]);
        let bank = build_memory_bank(&[(f.clone(), l)], Metric::Cosine).unwrap();
        assert_eq!(bank.entries, vec![(4, vec![2.0, 1.0])]);
        let none = lm(1, 3, &[IGNORE_LABEL; 3]);
        assert!(build_memory_bank(&[(f, none)], Metric::Cosine).is_err());
    }

    #[test]
    fn prototypes_k1_perfect() {
        let bank = SegMemoryBank {
            entries: vec![(0, vec![1.0, 0.0]), (1, vec![0.0, 1.0])],
            metric: Metric::Cosine,
        };
        let f = FeatureMap::new(1, 3, 2, vec![1.0, 0.0, 0.0, 1.0, 2.0, 0.0]).unwrap();
        assert_eq!(knn_segment(&bank, &f, 1).unwrap().labels, vec![0, 1, 0]);
    }

    #[test]
    fn vote_tie_rules() {
        // equal counts: larger similarity sum wins
        assert_eq!(vote([(1, 0.9), (2, 0.95), (1, 0.5), (2, 0.6)].into_iter()), 2);
        // equal counts and sums: lower id wins
        assert_eq!(vote([(3, 0.5), (2, 0.5)].into_iter()), 2);
    }
}
