//! Binary dilation.
//!
//! The disk element is evaluated through an exact squared Euclidean
//! distance transform (Meijster et al.), so the cost is linear in the pixel
//! count whatever the radius. The square element uses two separable passes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::image::BinaryMask;

/// Radius applied to selected masks unless configured otherwise.
pub const DEFAULT_DILATION_RADIUS: u32 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructuringElement {
    /// All offsets with dx² + dy² ≤ r².
    #[default]
    Disk,
    /// All offsets with max(|dx|, |dy|) ≤ r.
    Square,
}

/// Sets every pixel within `radius` of a set pixel.
pub fn dilate(mask: &BinaryMask, radius: u32) -> BinaryMask {
    dilate_with(mask, radius, StructuringElement::Disk)
}

pub fn dilate_with(mask: &BinaryMask, radius: u32, element: StructuringElement) -> BinaryMask {
    if radius == 0 || mask.is_empty() || mask.is_full() {
        return mask.clone();
    }
    let (w, h) = (mask.width() as usize, mask.height() as usize);
    let bits = match element {
        StructuringElement::Disk => {
            let r2 = radius as i64 * radius as i64;
            let diag2 = ((w - 1) * (w - 1) + (h - 1) * (h - 1)) as i64;
            if r2 >= diag2 {
                vec![true; w * h]
            } else {
                disk_dilate(mask, radius as usize, r2)
            }
        }
        StructuringElement::Square => square_dilate(mask.bits(), w, h, radius as usize),
    };
    BinaryMask::new(mask.width(), mask.height(), bits).expect("dims unchanged")
}

/// Squared Euclidean distance from every pixel to the nearest set pixel.
/// Pixels are `w + h` away from "nowhere", which exceeds any in-image
/// distance, so callers must only compare against radii below the diagonal.
pub fn squared_distance_transform(mask: &BinaryMask) -> Vec<i64> {
    let (w, h) = (mask.width() as usize, mask.height() as usize);
    let far = (w + h) as i64;
    let bits = mask.bits();

    // column pass, row-major: nearest set pixel above, then below
    let mut g = vec![far; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            g[i] = if bits[i] { 0 } else if y > 0 { (g[i - w] + 1).min(far) } else { far };
        }
    }
    for y in (0..h.saturating_sub(1)).rev() {
        let (cur, below) = g.split_at_mut((y + 1) * w);
        for (c, b) in cur[y * w..].iter_mut().zip(&below[..w]) {
            *c = (*c).min(b + 1);
        }
    }

    // row pass: lower envelope of parabolas (x - u)² + g(u)²
    let mut out = vec![0i64; w * h];
    out.par_chunks_mut(w)
        .zip(g.par_chunks(w))
        .for_each_init(|| (vec![0usize; w], vec![0i64; w]), |(s, t), (out_row, row)| {
            envelope_row(row, out_row, s, t)
        });
    out
}

fn envelope_row(row: &[i64], out: &mut [i64], s: &mut [usize], t: &mut [i64]) {
    let w = row.len();
    let f = |x: i64, i: usize| (x - i as i64).pow(2) + row[i] * row[i];
    let sep = |i: usize, u: usize| {
        let (ii, uu) = (i as i64, u as i64);
        (uu * uu - ii * ii + row[u] * row[u] - row[i] * row[i]).div_euclid(2 * (uu - ii))
    };
    let mut q: isize = 0;
    s[0] = 0;
    t[0] = 0;
    for u in 1..w {
        while q >= 0 && f(t[q as usize], s[q as usize]) > f(t[q as usize], u) {
            q -= 1;
        }
        if q < 0 {
            q = 0;
            s[0] = u;
        } else {
            let bound = 1 + sep(s[q as usize], u);
            if bound < w as i64 {
                q += 1;
                s[q as usize] = u;
                t[q as usize] = bound;
            }
        }
    }
    for u in (0..w).rev() {
        out[u] = f(u as i64, s[q as usize]);
        if u as i64 == t[q as usize] {
            q -= 1;
        }
    }
}

/// Runs the transform only over the set pixels' bounding box grown by
/// `r`; nothing outside it can be within `r` of a set pixel.
fn disk_dilate(mask: &BinaryMask, r: usize, r2: i64) -> Vec<bool> {
    let (w, h) = (mask.width() as usize, mask.height() as usize);
    let bits = mask.bits();
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
    for (y, row) in bits.chunks_exact(w).enumerate() {
        if let (Some(a), Some(b)) = (row.iter().position(|b| *b), row.iter().rposition(|b| *b)) {
            (x0, x1, y0, y1) = (x0.min(a), x1.max(b), y0.min(y), y);
        }
    }
    let (x0, y0) = (x0.saturating_sub(r), y0.saturating_sub(r));
    let (x1, y1) = ((x1 + r).min(w - 1), (y1 + r).min(h - 1));
    let (cw, ch) = (x1 - x0 + 1, y1 - y0 + 1);
    let crop = BinaryMask::from_fn(cw as u32, ch as u32, |x, y| bits[(y0 + y as usize) * w + x0 + x as usize])
        .expect("crop fits");
    let dist = squared_distance_transform(&crop);
    let mut out = vec![false; w * h];
    for (cy, drow) in dist.chunks_exact(cw).enumerate() {
        let orow = &mut out[(y0 + cy) * w + x0..][..cw];
        for (o, d) in orow.iter_mut().zip(drow) {
            *o = *d <= r2;
        }
    }
    out
}

fn square_dilate(bits: &[bool], w: usize, h: usize, r: usize) -> Vec<bool> {
    // horizontal pass, then vertical, each via distance to nearest set cell
    let mut horiz = vec![false; w * h];
    for y in 0..h {
        let row = &bits[y * w..(y + 1) * w];
        let near = nearest_distance(row.iter().copied());
        for x in 0..w {
            horiz[y * w + x] = near[x] <= r;
        }
    }
    let mut out = vec![false; w * h];
    for x in 0..w {
        let near = nearest_distance((0..h).map(|y| horiz[y * w + x]));
        for y in 0..h {
            out[y * w + x] = near[y] <= r;
        }
    }
    out
}

fn nearest_distance(line: impl Iterator<Item = bool>) -> Vec<usize> {
    let line: Vec<bool> = line.collect();
    let n = line.len();
    let far = usize::MAX / 2;
    let mut d = vec![far; n];
    let mut last = None;
    for i in 0..n {
        if line[i] {
            last = Some(i);
        }
        if let Some(l) = last {
            d[i] = i - l;
        }
    }
    last = None;
    for i in (0..n).rev() {
        if line[i] {
            last = Some(i);
        }
        if let Some(l) = last {
            d[i] = d[i].min(l - i);
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct O(w·h·r²) dilation: scan the element around every pixel.
    fn naive(mask: &BinaryMask, r: u32, element: StructuringElement) -> BinaryMask {
        let (w, h) = (mask.width() as i64, mask.height() as i64);
        let r = r as i64;
        BinaryMask::from_fn(mask.width(), mask.height(), |x, y| {
            for dy in -r..=r {
                for dx in -r..=r {
                    let inside = match element {
                        StructuringElement::Disk => dx * dx + dy * dy <= r * r,
                        StructuringElement::Square => true,
                    };
                    let (sx, sy) = (x as i64 + dx, y as i64 + dy);
                    if inside
                        && (0..w).contains(&sx)
                        && (0..h).contains(&sy)
                        && mask.get(sx as u32, sy as u32)
                    {
                        return true;
                    }
                }
            }
            false
        })
        .unwrap()
    }

    fn random_mask(rng: &mut ChaCha8Rng, w: u32, h: u32, density: f64) -> BinaryMask {
        BinaryMask::from_fn(w, h, |_, _| rng.gen_bool(density)).unwrap()
    }

    #[test]
    fn radius_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_mask(&mut rng, 13, 7, 0.2);
        assert_eq!(dilate(&m, 0), m);
    }

    #[test]
    fn empty_stays_empty() {
        let m = BinaryMask::empty(40, 40).unwrap();
        assert!(dilate(&m, DEFAULT_DILATION_RADIUS).is_empty());
    }

    #[test]
    fn full_mask_is_saturated() {
        let m = crate::image::full_mask(9, 4).unwrap();
        for r in [0, 1, 5, 100] {
            assert_eq!(dilate(&m, r), m);
        }
    }

    #[test]
    fn single_pixel_radius_three_is_a_disk() {
        let mut m = BinaryMask::empty(32, 32).unwrap();
        m.set(10, 10, true);
        let out = dilate(&m, 3);
        let mut expected = 0;
        for y in 0..32i64 {
            for x in 0..32i64 {
                let inside = (x - 10).pow(2) + (y - 10).pow(2) <= 9;
                assert_eq!(out.get(x as u32, y as u32), inside, "({x},{y})");
                expected += inside as usize;
            }
        }
        assert_eq!(out.popcount(), expected);
        assert_eq!(expected, 29);
    }

    #[test]
    fn matches_naive_oracle_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..40 {
            let (w, h) = (rng.gen_range(1..30), rng.gen_range(1..30));
            let density = [0.002, 0.02, 0.2][rng.gen_range(0..3)];
            let m = random_mask(&mut rng, w, h, density);
            for r in [0u32, 1, 2, 3, 7, 20] {
                for el in [StructuringElement::Disk, StructuringElement::Square] {
                    assert_eq!(dilate_with(&m, r, el), naive(&m, r, el), "{w}x{h} r={r} {el:?}");
                }
            }
        }
    }

    #[test]
    fn huge_radius_fills_from_one_pixel() {
        let mut m = BinaryMask::empty(5, 3).unwrap();
        m.set(0, 0, true);
        assert!(dilate(&m, 5).is_full());
        assert!(!dilate(&m, 4).is_full());
        assert_eq!(dilate(&m, 4), naive(&m, 4, StructuringElement::Disk));
    }

    proptest! {
        #[test]
        fn extensive_and_monotone(seed in any::<u64>(), r1 in 0u32..8, extra in 0u32..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_mask(&mut rng, 24, 17, 0.03);
            let a = dilate(&m, r1);
            let b = dilate(&m, r1 + extra);
            prop_assert!(m.is_subset_of(&a));
            prop_assert!(a.is_subset_of(&b));
        }
    }
}
