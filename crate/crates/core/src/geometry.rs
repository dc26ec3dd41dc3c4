//! Multi-scale token layout.
//!
//! A schedule of grid sides `s_1..s_K` lays out the KV cache as the
//! concatenation of square, row-major token grids. Scales are 1-based
//! throughout; `prefix(l)` is the number of tokens in scales `1..=l`, with
//! `prefix(0) = 0`, so scale `l` occupies global indices
//! `[prefix(l-1), prefix(l))`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid sides of the 13-step 1024² schedule.
pub const INFINITY_1K_SIDES: [usize; 13] = [1, 2, 4, 6, 8, 12, 16, 20, 24, 32, 40, 48, 64];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSchedule {
    sides: Vec<usize>,
    counts: Vec<usize>,
    cumulative: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ScaleOffset {
    /// 1-based scale index.
    pub scale: usize,
    /// Row-major offset inside the scale's grid.
    pub offset: usize,
}

impl ScaleSchedule {
    pub fn new(sides: &[usize]) -> Result<Self> {
        if sides.is_empty() {
            return Err(Error::Schedule("schedule needs at least one scale".into()));
        }
        if let Some(pos) = sides.iter().position(|&s| s == 0) {
            return Err(Error::Schedule(format!("side of scale {} is zero", pos + 1)));
        }
        if let Some(w) = sides.windows(2).position(|w| w[1] < w[0]) {
            return Err(Error::Schedule(format!(
                "sides must be non-decreasing, but scale {} has side {} after {}",
                w + 2,
                sides[w + 1],
                sides[w]
            )));
        }
        let counts: Vec<usize> = sides.iter().map(|s| s * s).collect();
        let cumulative = counts
            .iter()
            .scan(0usize, |acc, &n| {
                *acc += n;
                Some(*acc)
            })
            .collect();
        Ok(Self { sides: sides.to_vec(), counts, cumulative })
    }

    pub fn infinity_1k() -> Self {
        Self::new(&INFINITY_1K_SIDES).expect("built-in schedule is valid")
    }

    pub fn num_scales(&self) -> usize {
        self.sides.len()
    }

    pub fn sides(&self) -> &[usize] {
        &self.sides
    }

    /// `N_k` for every scale, in order.
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// `C_k` for every scale, in order (`cumulative()[k-1] = C_k`).
    pub fn cumulative(&self) -> &[usize] {
        &self.cumulative
    }

    pub fn side(&self, scale: usize) -> usize {
        self.sides[scale - 1]
    }

    pub fn count(&self, scale: usize) -> usize {
        self.counts[scale - 1]
    }

    /// Tokens in scales `1..=scale`; `prefix(0) = 0`.
    pub fn prefix(&self, scale: usize) -> usize {
        if scale == 0 {
            0
        } else {
            self.cumulative[scale - 1]
        }
    }

    pub fn total_tokens(&self) -> usize {
        *self.cumulative.last().expect("non-empty schedule")
    }

    pub fn check_scale(&self, scale: usize) -> Result<()> {
        if scale == 0 || scale > self.num_scales() {
            Err(Error::ScaleOutOfRange { scale, num_scales: self.num_scales() })
        } else {
            Ok(())
        }
    }

    /// Splits a global KV index into its scale and in-scale offset using the
    /// half-open rule `prefix(l-1) <= j < prefix(l)`.
    pub fn decompose(&self, j: usize) -> Result<ScaleOffset> {
        let total = self.total_tokens();
        if j >= total {
            return Err(Error::IndexOutOfRange { index: j, limit: total });
        }
        // first scale whose cumulative count exceeds j
        let l = self.cumulative.partition_point(|&c| c <= j) + 1;
        Ok(ScaleOffset { scale: l, offset: j - self.prefix(l - 1) })
    }

    pub fn recompose(&self, so: ScaleOffset) -> Result<usize> {
        self.check_scale(so.scale)?;
        let n = self.count(so.scale);
        if so.offset >= n {
            return Err(Error::IndexOutOfRange { index: so.offset, limit: n });
        }
        Ok(self.prefix(so.scale - 1) + so.offset)
    }

    /// Rescales a row-major offset of scale `from` onto the grid of scale
    /// `to` with `u' = floor(u * s_to / s_from)`, same for columns.
    pub fn project_offset(&self, offset: usize, from: usize, to: usize) -> Result<usize> {
        self.check_scale(from)?;
        self.check_scale(to)?;
        let (sf, st) = (self.side(from), self.side(to));
        let (u, v) = delinearize(offset, sf)?;
        let (pu, pv) = (u * st / sf, v * st / sf);
        linearize((pu, pv), st)
    }
}

/// Row-major `(row, col)` of `offset` in a `side × side` grid.
pub fn delinearize(offset: usize, side: usize) -> Result<(usize, usize)> {
    if offset >= side * side {
        return Err(Error::IndexOutOfRange { index: offset, limit: side * side });
    }
    Ok((offset / side, offset % side))
}

pub fn linearize((u, v): (usize, usize), side: usize) -> Result<usize> {
    if u >= side {
        return Err(Error::IndexOutOfRange { index: u, limit: side });
    }
    if v >= side {
        return Err(Error::IndexOutOfRange { index: v, limit: side });
    }
    Ok(u * side + v)
}

/// `round_half_up(x * to / from)` clamped to `to - 1`, in exact integer arithmetic.
pub fn align_axis(x: usize, from: usize, to: usize) -> usize {
    let r = (2 * x * to + from) / (2 * from);
    r.min(to - 1)
}

/// Aligns a position of a `(h_from, w_from)` grid onto a `(h_to, w_to)` grid.
pub fn align_coordinate(
    (x, y): (usize, usize),
    (h_from, w_from): (usize, usize),
    (h_to, w_to): (usize, usize),
) -> Result<(usize, usize)> {
    if h_from == 0 || w_from == 0 || h_to == 0 || w_to == 0 {
        return Err(Error::Shape("zero-sized grid".into()));
    }
    if x >= h_from {
        return Err(Error::IndexOutOfRange { index: x, limit: h_from });
    }
    if y >= w_from {
        return Err(Error::IndexOutOfRange { index: y, limit: w_from });
    }
    Ok((align_axis(x, h_from, h_to), align_axis(y, w_from, w_to)))
}

/// Parses a comma-separated side list such as `1,2,4,6`.
pub fn parse_sides(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<usize>().map_err(|_| Error::Schedule(format!("'{t}' is not a positive integer"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_scale() {
        let s = ScaleSchedule::new(&[1]).unwrap();
        assert_eq!(s.counts(), &[1]);
        assert_eq!(s.cumulative(), &[1]);
    }

    #[test]
    fn small_cumulative() {
        let s = ScaleSchedule::new(&[1, 2, 4]).unwrap();
        assert_eq!(s.cumulative(), &[1, 5, 21]);
    }

    #[test]
    fn rejects_bad_schedules() {
        assert!(matches!(ScaleSchedule::new(&[]), Err(Error::Schedule(_))));
        assert!(matches!(ScaleSchedule::new(&[1, 4, 2]), Err(Error::Schedule(_))));
        assert!(matches!(ScaleSchedule::new(&[0, 1]), Err(Error::Schedule(_))));
    }

    #[test]
    fn infinity_sums() {
        // Independent summation of the side list.
        let mut acc = 0;
        let mut sums = vec![];
        for s in INFINITY_1K_SIDES {
            acc += s * s;
            sums.push(acc);
        }
        assert_eq!(sums[4], 121);
        assert_eq!(sums[11], 6425);
        assert_eq!(sums[12], 10521);

        let s = ScaleSchedule::infinity_1k();
        assert_eq!(s.num_scales(), 13);
        assert_eq!(s.cumulative(), sums.as_slice());
        assert_eq!(s.count(13), 4096);
        assert_eq!(s.prefix(5), 121);
    }

    #[test]
    fn decompose_examples() {
        let s = ScaleSchedule::infinity_1k();
        assert_eq!(s.decompose(0).unwrap(), ScaleOffset { scale: 1, offset: 0 });
        assert_eq!(s.decompose(21).unwrap(), ScaleOffset { scale: 4, offset: 0 });
        assert_eq!(s.decompose(10520).unwrap(), ScaleOffset { scale: 13, offset: 4095 });
        assert!(s.decompose(10521).is_err());
    }

    #[test]
    fn decompose_round_trip_exhaustive() {
        let s = ScaleSchedule::infinity_1k();
        for j in 0..s.total_tokens() {
            let so = s.decompose(j).unwrap();
            assert_eq!(s.recompose(so).unwrap(), j);
        }
        for l in 1..=s.num_scales() {
            for d in 0..s.count(l) {
                let j = s.recompose(ScaleOffset { scale: l, offset: d }).unwrap();
                assert_eq!(s.decompose(j).unwrap(), ScaleOffset { scale: l, offset: d });
            }
        }
    }

    #[test]
    fn delinearize_examples() {
        assert_eq!(delinearize(0, 64).unwrap(), (0, 0));
        assert_eq!(delinearize(65, 64).unwrap(), (1, 1));
        for o in 0..144 {
            assert_eq!(linearize(delinearize(o, 12).unwrap(), 12).unwrap(), o);
        }
        assert!(delinearize(144, 12).is_err());
        assert!(linearize((12, 0), 12).is_err());
    }

    #[test]
    fn project_examples() {
        let s = ScaleSchedule::infinity_1k();
        for d in 0..s.count(7) {
            assert_eq!(s.project_offset(d, 7, 7).unwrap(), d);
        }
        // (1,1) in 2×2 → (3,3) in 6×6
        assert_eq!(s.project_offset(3, 2, 4).unwrap(), 21);
        assert!(s.project_offset(0, 0, 3).is_err());
        assert!(s.project_offset(0, 3, 14).is_err());
    }

    #[test]
    fn project_total_and_monotone() {
        let s = ScaleSchedule::new(&[1, 2, 3, 4, 6, 8]).unwrap();
        for l in 1..=6 {
            for l2 in l..=6 {
                let (sl, sl2) = (s.side(l), s.side(l2));
                for u in 0..sl {
                    for v in 0..sl {
                        let p = s.project_offset(u * sl + v, l, l2).unwrap();
                        assert!(p < s.count(l2));
                        let (pu, pv) = delinearize(p, sl2).unwrap();
                        if u + 1 < sl {
                            let (qu, _) = delinearize(s.project_offset((u + 1) * sl + v, l, l2).unwrap(), sl2).unwrap();
                            assert!(qu >= pu);
                        }
                        if v + 1 < sl {
                            let (_, qv) = delinearize(s.project_offset(u * sl + v + 1, l, l2).unwrap(), sl2).unwrap();
                            assert!(qv >= pv);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn align_examples() {
        assert_eq!(align_coordinate((0, 0), (64, 64), (48, 48)).unwrap(), (0, 0));
        assert_eq!(align_axis(63, 64, 48), 47);
        for x in 0..40 {
            assert_eq!(align_coordinate((x, 39 - x), (40, 40), (40, 40)).unwrap(), (x, 39 - x));
        }
        assert!(align_coordinate((0, 0), (0, 4), (4, 4)).is_err());
        assert!(align_coordinate((4, 0), (4, 4), (4, 4)).is_err());
    }

    #[test]
    fn align_rounds_half_up() {
        // 1 * 3 / 2 = 1.5 rounds to 2
        assert_eq!(align_axis(1, 2, 3), 2);
        // 3 * 4 / 8 = 1.5 rounds to 2
        assert_eq!(align_axis(3, 8, 4), 2);
        // far edge would round to `to`; clamped
        assert_eq!(align_axis(1, 2, 1), 0);
    }

    #[test]
    fn parse_side_list() {
        assert_eq!(parse_sides("1, 2,4").unwrap(), vec![1, 2, 4]);
        assert!(parse_sides("1,x").is_err());
    }

    proptest! {
        #[test]
        fn align_matches_float_rounding(x in 0usize..200, from in 1usize..200, to in 1usize..200) {
            prop_assume!(x < from);
            let expected = ((x as f64 / from as f64) * to as f64 + 0.5).floor() as usize;
            let expected = expected.min(to - 1);
            // skip exact .5 ties where float error could flip the result
            let frac = (x as f64 * to as f64 / from as f64).fract();
            prop_assume!((frac - 0.5).abs() > 1e-9);
            prop_assert_eq!(align_axis(x, from, to), expected);
        }

        #[test]
        fn align_monotone(from in 1usize..100, to in 1usize..100) {
            let mut prev = 0;
            for x in 0..from {
                let a = align_axis(x, from, to);
                prop_assert!(a >= prev && a < to);
                prev = a;
            }
        }
    }
}
