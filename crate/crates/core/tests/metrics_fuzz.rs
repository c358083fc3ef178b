//! Fuzzed invariances for the evaluation metrics and the brute-force
//! boundary-band oracle.

use pseg_core::cluster::{Mode, Segmentation};
use pseg_core::geometry::LineFeature;
use pseg_core::labels::EntityLabels;
use pseg_core::metrics::{self, boundary_band_radius};
use pseg_testkit::{band, SplitMix64};

fn random_partition(rng: &mut SplitMix64, h: usize, w: usize, max_ids: usize) -> Vec<u32> {
    // Random rectangles splattered over a base segment: always a total map.
    let mut labels = vec![1u32; h * w];
    for id in 2..=max_ids as u32 {
        let rh = 2 + rng.below(h / 2);
        let rw = 2 + rng.below(w / 2);
        let y0 = rng.below(h - rh);
        let x0 = rng.below(w - rw);
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                labels[y * w + x] = id;
            }
        }
    }
    labels
}

fn compact(labels: &mut [u32]) -> u32 {
    // Relabel to contiguous 1..=n in first-appearance order.
    let mut map = std::collections::BTreeMap::new();
    let mut next = 0u32;
    for l in labels.iter_mut() {
        let id = *map.entry(*l).or_insert_with(|| {
            next += 1;
            next
        });
        *l = id;
    }
    next
}

fn seg_of(labels: Vec<u32>, h: usize, w: usize, rng: &mut SplitMix64) -> Segmentation {
    let n = labels.iter().copied().max().unwrap_or(0) as usize;
    let modes = (0..n)
        .map(|i| Mode {
            center: LineFeature::from_unit(vec![1.0, 0.0]),
            support: labels.iter().filter(|&&l| l == i as u32 + 1).count(),
            mean_similarity: rng.uniform(0.3, 1.0) as f32,
        })
        .collect();
    Segmentation { h, w, labels, modes }
}

fn permute_pred(seg: &Segmentation, perm: &[u32]) -> Segmentation {
    // perm maps old id-1 -> new id; modes reordered to match.
    let labels: Vec<u32> = seg.labels.iter().map(|&l| perm[l as usize - 1]).collect();
    let mut modes = vec![
        Mode {
            center: LineFeature::from_unit(vec![1.0, 0.0]),
            support: 0,
            mean_similarity: 0.0,
        };
        seg.modes.len()
    ];
    for (old, m) in seg.modes.iter().enumerate() {
        modes[(perm[old] - 1) as usize] = m.clone();
    }
    Segmentation {
        h: seg.h,
        w: seg.w,
        labels,
        modes,
    }
}

#[test]
fn relabeling_never_changes_recall_or_ap() {
    let mut rng = SplitMix64::new(314);
    let (h, w) = (12, 12);
    for case in 0..1000 {
        let mut gt_raw = random_partition(&mut rng, h, w, 3);
        // make one segment the background
        let bg_id = 1 + rng.below(3) as u32;
        for l in gt_raw.iter_mut() {
            if *l == bg_id {
                *l = 0;
            }
        }
        let mut gt_copy = gt_raw.clone();
        // GT relabeling: compact in a scrambled scan order (reverse)
        let k = {
            let mut rev: Vec<u32> = gt_copy.iter().rev().copied().collect();
            let _ = compact(&mut rev);
            rev.reverse();
            // keep zeros as background
            for (a, b) in gt_copy.iter_mut().zip(rev) {
                *a = if *a == 0 { 0 } else { b };
            }
            compact_nonzero(&mut gt_copy)
        };
        let _ = k;

        let mut pred_raw = random_partition(&mut rng, h, w, 4);
        let n_pred = compact(&mut pred_raw);
        let pred = seg_of(pred_raw, h, w, &mut rng);

        // random permutation of prediction ids
        let mut perm: Vec<u32> = (1..=n_pred).collect();
        for i in (1..perm.len()).rev() {
            let j = rng.below(i + 1);
            perm.swap(i, j);
        }
        let pred_permuted = permute_pred(&pred, &perm);

        let gt_a = EntityLabels::from_raw_unchecked(gt_raw, h, w);
        let gt_b = EntityLabels::from_raw_unchecked(gt_copy, h, w);

        let ra = metrics::recall_at(&pred, &gt_a, 0.5);
        let rb = metrics::recall_at(&pred_permuted, &gt_b, 0.5);
        assert_eq!(ra.recall, rb.recall, "case {case}: recall moved");

        let apa = metrics::average_precision(&pred, &gt_a);
        let apb = metrics::average_precision(&pred_permuted, &gt_b);
        match (apa, apb) {
            (None, None) => {}
            (Some(a), Some(b)) => {
                assert!((a.ap50 - b.ap50).abs() < 1e-6, "case {case}: ap50");
                assert!((a.ap75 - b.ap75).abs() < 1e-6, "case {case}: ap75");
                assert!((a.map - b.map).abs() < 1e-6, "case {case}: map");
            }
            other => panic!("case {case}: AP defined-ness changed: {other:?}"),
        }

        // one-to-one property at 0.5
        let mut used = std::collections::BTreeSet::new();
        for e in ra.per_entity.iter().filter(|e| e.matched) {
            assert!(used.insert(e.pred.unwrap()), "case {case}: double match");
        }
    }
}

/// Contiguously renumbers nonzero labels in first-appearance order.
fn compact_nonzero(labels: &mut [u32]) -> u32 {
    let mut map = std::collections::BTreeMap::new();
    let mut next = 0u32;
    for l in labels.iter_mut() {
        if *l == 0 {
            continue;
        }
        let id = *map.entry(*l).or_insert_with(|| {
            next += 1;
            next
        });
        *l = id;
    }
    next
}

#[test]
fn iou_metrics_are_symmetric_on_fuzzed_masks() {
    let mut rng = SplitMix64::new(2000);
    let (h, w) = (14, 10);
    for _ in 0..300 {
        let a: Vec<bool> = (0..h * w).map(|_| rng.below(3) == 0).collect();
        let b: Vec<bool> = (0..h * w).map(|_| rng.below(2) == 0).collect();
        assert_eq!(metrics::mask_iou(&a, &b), metrics::mask_iou(&b, &a));
        let ba = metrics::boundary_iou(&a, &b, h, w, 0.02);
        let bb = metrics::boundary_iou(&b, &a, h, w, 0.02);
        assert_eq!(ba, bb);
    }
}

#[test]
fn boundary_iou_matches_the_bruteforce_oracle() {
    let mut rng = SplitMix64::new(321);
    let (h, w) = (20, 20);
    for case in 0..50 {
        // blobs from overlapping rectangles
        let blob = |rng: &mut SplitMix64| -> Vec<bool> {
            let mut m = vec![false; h * w];
            for _ in 0..2 + rng.below(2) {
                let rh = 3 + rng.below(8);
                let rw = 3 + rng.below(8);
                let y0 = rng.below(h - rh);
                let x0 = rng.below(w - rw);
                for y in y0..y0 + rh {
                    for x in x0..x0 + rw {
                        m[y * w + x] = true;
                    }
                }
            }
            m
        };
        let a = blob(&mut rng);
        let b = blob(&mut rng);
        let r = boundary_band_radius(h, w, 0.02);
        let got = metrics::boundary_iou(&a, &b, h, w, 0.02) as f64;
        let want = band::boundary_iou(&a, &b, h, w, r);
        assert!((got - want).abs() < 1e-6, "case {case}: {got} vs {want}");
    }
}

#[test]
fn shifted_square_matches_bruteforce_band_computation() {
    // 20x20 square shifted by one pixel, r = 2: the exact value comes from
    // the brute-force band oracle.
    let (h, w) = (26, 26);
    let mut a = vec![false; h * w];
    let mut b = vec![false; h * w];
    for y in 3..23 {
        for x in 3..23 {
            a[y * w + x] = true;
            b[y * w + (x + 1).min(w - 1)] = true;
        }
    }
    // dilation_frac chosen so r = 2 at this diagonal
    let frac = 0.055f32;
    let r = boundary_band_radius(h, w, frac);
    assert_eq!(r, 2);
    let got = metrics::boundary_iou(&a, &b, h, w, frac) as f64;
    let want = band::boundary_iou(&a, &b, h, w, 2);
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    assert!(got < 1.0, "shifting must hurt the boundary agreement");
}
