#![allow(dead_code)]

use posa::types::PanopticMap;
use posa::rng::Rng;

/// Categories below this id are stuff, the rest things.
pub const STUFF_BELOW: usize = 2;
pub const CATEGORIES: usize = 4;

/// Paint rectangles `(x0, y0, x1, y1, category)` (inclusive) over a category-0 background,
/// later ones on top, and keep only the segments visible at the end.
pub fn map_from_rects(size: usize, rects: &[(usize, usize, usize, usize, usize)]) -> PanopticMap {
    let mut labels = vec![0usize; size * size];
    let mut attrs = vec![(0usize, false)];
    for &(x0, y0, x1, y1, cat) in rects {
        let id = attrs.len();
        attrs.push((cat, cat >= STUFF_BELOW));
        for y in y0.min(y1)..=y0.max(y1).min(size - 1) {
            for x in x0.min(x1)..=x0.max(x1).min(size - 1) {
                labels[y * size + x] = id;
            }
        }
    }
    let mut remap = vec![usize::MAX; attrs.len()];
    let mut kept = Vec::new();
    for &l in &labels {
        if remap[l] == usize::MAX {
            remap[l] = kept.len();
            kept.push(attrs[l]);
        }
    }
    let labels: Vec<usize> = labels.iter().map(|&l| remap[l]).collect();
    PanopticMap::from_labels(size, &labels, &kept).expect("every kept label is non-empty")
}

pub fn random_rects(rng: &mut Rng, size: usize, max_rects: usize) -> Vec<(usize, usize, usize, usize, usize)> {
    let n = rng.below(max_rects + 1);
    (0..n)
        .map(|_| {
            (
                rng.below(size),
                rng.below(size),
                rng.below(size),
                rng.below(size),
                rng.below(CATEGORIES),
            )
        })
        .collect()
}

/// A random small map with few enough segments per category for the exhaustive oracle.
pub fn random_map(rng: &mut Rng, size: usize) -> PanopticMap {
    map_from_rects(size, &random_rects(rng, size, 5))
}
