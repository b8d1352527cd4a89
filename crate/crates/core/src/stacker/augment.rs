use rand::seq::index;
use rand::Rng;

use super::TileSample;
use crate::error::{Error, Result};
use crate::seed;

/// One of the 8 symmetries of the square.
///
/// Each element is stored as (swap, flip_rows, flip_cols): output pixel
/// `(i, j)` reads input `(p, q)` where `(p, q) = swap ? (j, i) : (i, j)`,
/// followed by `p -> n-1-p` and/or `q -> n-1-q`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dihedral(u8);

const TRIPLES: [(bool, bool, bool); 8] = [
    (false, false, false), // identity
    (true, false, true),   // rot90 (counter-clockwise)
    (false, true, true),   // rot180
    (true, true, false),   // rot270
    (false, false, true),  // horizontal flip
    (false, true, false),  // vertical flip
    (true, false, false),  // transpose
    (true, true, true),    // anti-transpose
];

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral(0);
    pub const ROT90: Dihedral = Dihedral(1);
    pub const ROT180: Dihedral = Dihedral(2);
    pub const ROT270: Dihedral = Dihedral(3);
    pub const HFLIP: Dihedral = Dihedral(4);
    pub const VFLIP: Dihedral = Dihedral(5);
    pub const TRANSPOSE: Dihedral = Dihedral(6);
    pub const ANTI_TRANSPOSE: Dihedral = Dihedral(7);

    pub fn new(element: u8) -> Option<Dihedral> {
        (element < 8).then_some(Dihedral(element))
    }

    pub fn all() -> impl Iterator<Item = Dihedral> {
        (0..8).map(Dihedral)
    }

    pub fn index(self) -> u8 {
        self.0
    }

    fn from_triple(t: (bool, bool, bool)) -> Dihedral {
        Dihedral(TRIPLES.iter().position(|&x| x == t).unwrap() as u8)
    }

    /// Source pixel read by output pixel `(i, j)` on an `n` x `n` grid.
    pub fn source(self, i: usize, j: usize, n: usize) -> (usize, usize) {
        let (swap, fr, fc) = TRIPLES[self.0 as usize];
        let (mut p, mut q) = if swap { (j, i) } else { (i, j) };
        if fr {
            p = n - 1 - p;
        }
        if fc {
            q = n - 1 - q;
        }
        (p, q)
    }

    /// `self.then(other)`: apply `self` first, then `other`.
    pub fn then(self, other: Dihedral) -> Dihedral {
        // out2(i,j) = out1(other.source(i,j)) = in(self.source(other.source(i,j)))
        let (s1, r1, c1) = TRIPLES[self.0 as usize];
        let (s2, r2, c2) = TRIPLES[other.0 as usize];
        // other maps (i,j) -> swap2 then flips (r2, c2); then self applies swap1
        // and flips (r1, c1). When self swaps, other's flips change axes.
        let (r2, c2) = if s1 { (c2, r2) } else { (r2, c2) };
        Dihedral::from_triple((s1 ^ s2, r1 ^ r2, c1 ^ c2))
    }

    pub fn inverse(self) -> Dihedral {
        Dihedral::all()
            .find(|d| self.then(*d) == Dihedral::IDENTITY)
            .unwrap()
    }
}

fn permute(src: &[f32], n: usize, d: Dihedral, dst: &mut [f32]) {
    for i in 0..n {
        for j in 0..n {
            let (p, q) = d.source(i, j, n);
            dst[i * n + j] = src[p * n + q];
        }
    }
}

/// Applies `element` identically to every input channel and to the target.
pub fn dihedral(s: &TileSample, element: Dihedral) -> Result<TileSample> {
    if s.height != s.width {
        return Err(Error::NonSquareTile {
            height: s.height,
            width: s.width,
        });
    }
    if element == Dihedral::IDENTITY {
        return Ok(s.clone());
    }
    let n = s.width;
    let mut out = s.clone();
    for (src, dst) in s.input.chunks(n * n).zip(out.input.chunks_mut(n * n)) {
        permute(src, n, element, dst);
    }
    for i in 0..n {
        for j in 0..n {
            let (p, q) = element.source(i, j, n);
            out.target[i * n + j] = s.target[p * n + q];
        }
    }
    Ok(out)
}

/// Forgets `k` present date slots, with `k` uniform in `0..=floor(max_fraction * D)`.
pub fn satellite_dropout(s: &TileSample, rng_seed: u64, max_fraction: f64) -> TileSample {
    let mut out = s.clone();
    let present: Vec<usize> = (0..s.present.len()).filter(|&i| s.present[i]).collect();
    let d = present.len();
    if d == 0 || !(max_fraction > 0.0) {
        return out;
    }
    let k_max = ((max_fraction.min(1.0) * d as f64).floor() as usize).min(d);
    let mut rng = seed::rng(rng_seed, &[]);
    let k = rng.random_range(0..=k_max);
    let n = s.pixel_count();
    for pick in index::sample(&mut rng, d, k) {
        let slot = present[pick];
        let l = &s.layout[slot];
        out.input[l.channel_start * n..(l.channel_start + l.channel_count) * n].fill(s.fill);
        out.present[slot] = false;
    }
    out
}

#[cfg(test)]
mod tests {
    use chrono::NaiveDate;

    use super::*;
    use crate::raster::GeoBox;
    use crate::stacker::SlotLayout;
    use crate::raster::Satellite;

    fn sample(n: usize, slots: usize) -> TileSample {
        let channels = slots;
        TileSample {
            id: "t".into(),
            input: (0..channels * n * n).map(|v| v as f32).collect(),
            channels,
            height: n,
            width: n,
            target: (0..n * n).map(|v| (v % 3 == 0) as u8).collect(),
            geobox: GeoBox::new(0.0, 0.0, 1.0, 1.0, n, n).unwrap(),
            target_date: NaiveDate::from_ymd_opt(2019, 8, 1).unwrap(),
            present: vec![true; slots],
            layout: (0..slots)
                .map(|i| SlotLayout {
                    satellite: Satellite::Sentinel1,
                    slot: i,
                    channel_start: i,
                    channel_count: 1,
                })
                .collect(),
            fill: -1.0,
        }
    }

    #[test]
    fn identity_and_rot90_order_four() {
        let s = sample(5, 2);
        assert_eq!(dihedral(&s, Dihedral::IDENTITY).unwrap(), s);
        let mut r = s.clone();
        for _ in 0..4 {
            r = dihedral(&r, Dihedral::ROT90).unwrap();
        }
        assert_eq!(r, s);
        assert_ne!(dihedral(&s, Dihedral::ROT90).unwrap(), s);
    }

    #[test]
    fn transpose_index_arithmetic() {
        let w = 4;
        let mut s = sample(w, 1);
        s.input = (0..w * w).map(|v| v as f32).collect();
        let t = dihedral(&s, Dihedral::TRANSPOSE).unwrap();
        for i in 0..w {
            for j in 0..w {
                assert_eq!(t.input[i * w + j], (j * w + i) as f32);
            }
        }
    }

    #[test]
    fn rot90_is_counter_clockwise() {
        // [[0,1],[2,3]] rotated counter-clockwise is [[1,3],[0,2]]
        let mut s = sample(2, 1);
        s.input = vec![0.0, 1.0, 2.0, 3.0];
        let r = dihedral(&s, Dihedral::ROT90).unwrap();
        assert_eq!(r.input, vec![1.0, 3.0, 0.0, 2.0]);
    }

    #[test]
    fn non_square_rejected() {
        let mut s = sample(4, 1);
        s.height = 2;
        s.width = 8;
        assert!(matches!(dihedral(&s, Dihedral::ROT90), Err(Error::NonSquareTile { .. })));
    }

    #[test]
    fn dropout_without_present_slots_is_noop() {
        let mut s = sample(3, 4);
        s.present = vec![false; 4];
        assert_eq!(satellite_dropout(&s, 11, 0.5), s);
    }

    #[test]
    fn dropout_is_deterministic_and_consistent() {
        let s = sample(3, 8);
        for seed in 0..50 {
            let a = satellite_dropout(&s, seed, 0.5);
            assert_eq!(a, satellite_dropout(&s, seed, 0.5));
            for (slot, l) in a.layout.iter().enumerate() {
                let block = &a.input[l.channel_start * 9..(l.channel_start + 1) * 9];
                if a.present[slot] {
                    assert_eq!(block, s.channel(l.channel_start));
                } else {
                    assert!(block.iter().all(|&v| v == -1.0));
                }
            }
        }
    }
}
