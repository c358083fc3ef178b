//! Entity label maps and ground-truth erosion.
//!
//! Annotation boundaries are unreliable, so every label map is eroded with a
//! 5x5 window before any loss sees it: a pixel stays valid only when its full
//! window (clamped at the borders) carries one label. Entities that lose all
//! their pixels to erosion are dropped and the ids renumbered.

/// Label map with erosion mask. Labels: 0 is the background category,
/// `1..=k` are entities; `valid` marks pixels that survived erosion.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityLabels {
    pub h: usize,
    pub w: usize,
    pub labels: Vec<u32>,
    pub valid: Vec<bool>,
    pub k: usize,
}

impl EntityLabels {
    /// Erodes a raw label map and renumbers surviving entities contiguously.
    pub fn from_raw(raw: &[u32], h: usize, w: usize) -> EntityLabels {
        assert_eq!(raw.len(), h * w);
        let valid = erode(raw, h, w);

        let max_id = raw.iter().copied().max().unwrap_or(0) as usize;
        let mut survivor = vec![false; max_id + 1];
        for i in 0..raw.len() {
            if valid[i] && raw[i] > 0 {
                survivor[raw[i] as usize] = true;
            }
        }
        let mut remap = vec![0u32; max_id + 1];
        let mut next = 0u32;
        for id in 1..=max_id {
            if survivor[id] {
                next += 1;
                remap[id] = next;
            }
        }
        let labels: Vec<u32> = raw.iter().map(|&l| remap[l as usize]).collect();
        EntityLabels {
            h,
            w,
            labels,
            valid,
            k: next as usize,
        }
    }

    /// Wraps a label map without erosion (every pixel valid); the evaluation
    /// path compares against full masks.
    pub fn from_raw_unchecked(raw: Vec<u32>, h: usize, w: usize) -> EntityLabels {
        assert_eq!(raw.len(), h * w);
        let k = raw.iter().copied().max().unwrap_or(0) as usize;
        EntityLabels {
            h,
            w,
            valid: vec![true; raw.len()],
            labels: raw,
            k,
        }
    }

    pub fn n_pixels(&self) -> usize {
        self.h * self.w
    }

    /// Valid pixels of one entity.
    pub fn entity_pixels(&self, entity: u32) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&i| self.labels[i] == entity && self.valid[i])
            .collect()
    }

    /// Valid background pixels.
    pub fn background_pixels(&self) -> Vec<usize> {
        self.entity_pixels(0)
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Full (unmasked) binary mask of an entity.
    pub fn entity_mask(&self, entity: u32) -> Vec<bool> {
        self.labels.iter().map(|&l| l == entity).collect()
    }
}

fn erode(labels: &[u32], h: usize, w: usize) -> Vec<bool> {
    let mut valid = vec![true; h * w];
    for y in 0..h {
        for x in 0..w {
            let me = labels[y * w + x];
            'win: for dy in -2i64..=2 {
                let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                for dx in -2i64..=2 {
                    let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    if labels[yy * w + xx] != me {
                        valid[y * w + x] = false;
                        break 'win;
                    }
                }
            }
        }
    }
    valid
}
