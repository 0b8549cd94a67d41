//! Center-line scribbles from dense label maps.
//!
//! Every class region (background included) is thinned to its Zhang–Suen
//! skeleton; a contiguous run covering 30–70% of the skeleton is kept.

use rand::Rng;

use crate::label::{LabelMap, IGNORE};

/// Regions at least this large always keep one scribble pixel.
pub const MIN_REGION: usize = 9;

const RING: [(isize, isize); 8] = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)];

/// Zhang–Suen thinning. Pixels outside the image count as unset.
pub fn skeletonize(mask: &[bool], height: usize, width: usize) -> Vec<bool> {
    let mut m = mask.to_vec();
    let at = |m: &[bool], y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < height && (x as usize) < width && m[y as usize * width + x as usize]
    };
    let mut remove = Vec::new();
    loop {
        let mut changed = false;
        for pass in 0..2 {
            remove.clear();
            for y in 0..height as isize {
                for x in 0..width as isize {
                    if !m[y as usize * width + x as usize] {
                        continue;
                    }
                    let p: Vec<bool> = RING.iter().map(|&(dy, dx)| at(&m, y + dy, x + dx)).collect();
                    let b = p.iter().filter(|&&v| v).count();
                    let a = (0..8).filter(|&i| !p[i] && p[(i + 1) % 8]).count();
                    // p[0]=N, p[2]=E, p[4]=S, p[6]=W
                    let cond = if pass == 0 {
                        !(p[0] && p[2] && p[4]) && !(p[2] && p[4] && p[6])
                    } else {
                        !(p[0] && p[2] && p[6]) && !(p[0] && p[4] && p[6])
                    };
                    if (2..=6).contains(&b) && a == 1 && cond {
                        remove.push(y as usize * width + x as usize);
                    }
                }
            }
            for &i in &remove {
                m[i] = false;
            }
            changed |= !remove.is_empty();
        }
        if !changed {
            return m;
        }
    }
}

/// Skeleton pixels in walk order: depth-first along 8-connected
/// components, each started from an endpoint where one exists.
fn walk_order(skel: &[bool], height: usize, width: usize) -> Vec<usize> {
    let neighbours = |i: usize| {
        let (y, x) = ((i / width) as isize, (i % width) as isize);
        RING.iter().filter_map(move |&(dy, dx)| {
            let (ny, nx) = (y + dy, x + dx);
            (ny >= 0 && nx >= 0 && (ny as usize) < height && (nx as usize) < width)
                .then(|| ny as usize * width + nx as usize)
        })
    };
    let degree = |i: usize| neighbours(i).filter(|&j| skel[j]).count();
    let mut seen = vec![false; skel.len()];
    let mut order = Vec::new();
    let mut starts: Vec<usize> = (0..skel.len()).filter(|&i| skel[i] && degree(i) <= 1).collect();
    starts.extend((0..skel.len()).filter(|&i| skel[i]));
    let mut stack = Vec::new();
    for s in starts {
        if seen[s] {
            continue;
        }
        stack.push(s);
        seen[s] = true;
        while let Some(i) = stack.pop() {
            order.push(i);
            for j in neighbours(i) {
                if skel[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    order
}

/// Upper bound on the annotated share of an image. When the skeletons are
/// long, the retained share is drawn from a narrowed range so the bound
/// holds wherever 30% retention allows it.
pub const MAX_COVERAGE: f64 = 0.05;

/// Scribble map for `dense`: skeleton runs per class, [`IGNORE`] elsewhere.
/// Every scribble pixel carries its dense class.
pub fn derive_scribbles(dense: &LabelMap, rng: &mut impl Rng) -> LabelMap {
    let (h, w) = (dense.height, dense.width);
    let mut out = LabelMap::filled(h, w, IGNORE);
    let mut classes: Vec<u8> = dense.data.iter().copied().filter(|&v| v != IGNORE).collect();
    classes.sort_unstable();
    classes.dedup();
    let regions: Vec<(u8, Vec<bool>, Vec<usize>)> = classes
        .into_iter()
        .map(|class| {
            let mask: Vec<bool> = dense.data.iter().map(|&v| v == class).collect();
            let order = walk_order(&skeletonize(&mask, h, w), h, w);
            (class, mask, order)
        })
        .collect();
    let skeleton: usize = regions.iter().map(|r| r.2.len()).sum();
    let cap = (MAX_COVERAGE * (h * w) as f64 / skeleton.max(1) as f64).clamp(0.3, 0.7);
    for (class, mask, order) in regions {
        let keep_frac = rng.gen_range(0.3..=cap);
        if order.is_empty() {
            if mask.iter().filter(|&&v| v).count() >= MIN_REGION {
                out.data[centre_pixel(&mask, w)] = class;
            }
            continue;
        }
        let keep = ((order.len() as f64 * keep_frac).round() as usize).clamp(1, order.len());
        let start = rng.gen_range(0..order.len());
        for k in 0..keep {
            out.data[order[(start + k) % order.len()]] = class;
        }
    }
    out
}

/// Region pixel nearest the region centroid.
fn centre_pixel(mask: &[bool], width: usize) -> usize {
    let idx: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let n = idx.len() as f64;
    let cy = idx.iter().map(|&i| (i / width) as f64).sum::<f64>() / n;
    let cx = idx.iter().map(|&i| (i % width) as f64).sum::<f64>() / n;
    let d = |i: usize| ((i / width) as f64 - cy).powi(2) + ((i % width) as f64 - cx).powi(2);
    *idx.iter().min_by(|&&a, &&b| d(a).total_cmp(&d(b))).expect("non-empty region")
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn skeleton_of_a_bar_is_a_thin_line() {
        let (h, w) = (7, 15);
        let mask: Vec<bool> = (0..h * w).map(|i| (2..5).contains(&(i / w)) && (2..13).contains(&(i % w))).collect();
        let s = skeletonize(&mask, h, w);
        let on: Vec<usize> = (0..h * w).filter(|&i| s[i]).collect();
        assert!(!on.is_empty());
        assert!(on.iter().all(|&i| mask[i]));
        assert!(on.iter().all(|&i| i / w == 3), "{on:?}");
    }

    #[test]
    fn empty_foreground_gives_background_skeleton_only() {
        let dense = LabelMap::filled(16, 16, 0);
        let s = derive_scribbles(&dense, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(s.count(0) > 0);
        assert_eq!(s.count(0) + s.count(IGNORE), 256);
    }

    #[test]
    fn scribbles_are_sound_and_every_large_class_is_kept() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut dense = LabelMap::filled(32, 32, 0);
        for y in 4..14 {
            for x in 4..20 {
                dense.set(y, x, 1);
            }
        }
        for y in 20..23 {
            for x in 20..23 {
                dense.set(y, x, 2);
            }
        }
        for _ in 0..20 {
            let s = derive_scribbles(&dense, &mut rng);
            for (i, &v) in s.data.iter().enumerate() {
                assert!(v == IGNORE || v == dense.data[i]);
            }
            for c in 0..3 {
                assert!(s.count(c) >= 1, "class {c}");
            }
            assert!(s.count(IGNORE) > 0);
        }
    }
}
