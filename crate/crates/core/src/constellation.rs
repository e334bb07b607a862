//! Bit labeling and the trainable transmitter.
//!
//! A constellation of order `M = 2^m` stores its points in label order: the
//! point at index `i` carries the label whose bits, most significant first,
//! spell `i`. Training moves the points; the labeling never changes.

use std::fmt::Write as _;
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{CVar, Tape};

pub const MAX_BITS_PER_SYMBOL: usize = 16;

/// Bit vector `(b_1, …, b_m)`; `b_1` is the most significant bit of the
/// point index.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BitBlock(Vec<u8>);

impl BitBlock {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::Input(format!("bit value {b} is not binary")));
        }
        Ok(Self(bits))
    }

    /// Label of point `index` in a constellation with `m` bits per symbol.
    pub fn from_index(index: usize, m: usize) -> Self {
        Self((0..m).map(|j| ((index >> (m - 1 - j)) & 1) as u8).collect())
    }

    pub fn index(&self) -> usize {
        self.0.iter().fold(0, |acc, &b| (acc << 1) | b as usize)
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::fmt::Display for BitBlock {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for b in &self.0 {
            f.write_char(if *b == 1 { '1' } else { '0' })?;
        }
        Ok(())
    }
}

impl std::str::FromStr for BitBlock {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(Error::Input(format!("invalid bit character {other:?}"))),
            })
            .collect::<Result<Vec<u8>>>()
            .map(Self)
    }
}

/// One-hot vector of length `M` with a single hot entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OneHot {
    len: usize,
    hot: usize,
}

impl OneHot {
    pub fn new(len: usize, hot: usize) -> Result<Self> {
        if hot >= len {
            return Err(Error::Shape(format!("hot index {hot} out of length {len}")));
        }
        Ok(Self { len, hot })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn hot(&self) -> usize {
        self.hot
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.len];
        v[self.hot] = 1.0;
        v
    }
}

pub fn bits_to_onehot(bits: &BitBlock, m: usize) -> Result<OneHot> {
    if bits.len() != m {
        return Err(Error::Shape(format!(
            "expected {m} bits, got {}",
            bits.len()
        )));
    }
    OneHot::new(1 << m, bits.index())
}

/// Labeled point set of order `2^m`.
#[derive(Debug, Clone, PartialEq)]
pub struct Constellation {
    m: usize,
    points: Vec<Complex64>,
}

impl Constellation {
    pub fn new(m: usize, points: Vec<Complex64>) -> Result<Self> {
        if m == 0 || m > MAX_BITS_PER_SYMBOL {
            return Err(Error::Parameter(format!("bits per symbol {m} out of range")));
        }
        if points.len() != 1 << m {
            return Err(Error::Shape(format!(
                "{} points for m = {m}, expected {}",
                points.len(),
                1usize << m
            )));
        }
        if points.iter().any(|p| !p.re.is_finite() || !p.im.is_finite()) {
            return Err(Error::NumericDomain {
                op: "constellation",
                detail: "non-finite point coordinate".into(),
            });
        }
        Ok(Self { m, points })
    }

    /// Gray-labeled square QAM, power normalized.
    ///
    /// The first `m/2` label bits select the in-phase amplitude and the last
    /// `m/2` the quadrature amplitude; neighboring amplitudes on either axis
    /// differ in exactly one bit of their half.
    pub fn square_qam(m: usize) -> Result<Self> {
        if m == 0 || m % 2 != 0 {
            return Err(Error::Parameter(format!(
                "square QAM needs an even number of bits, got {m}"
            )));
        }
        let half = m / 2;
        let side = 1usize << half;
        let amplitude = |label: usize| 2.0 * gray_decode(label) as f64 - (side as f64 - 1.0);
        let points = (0..1usize << m)
            .map(|i| Complex64::new(amplitude(i >> half), amplitude(i & (side - 1))))
            .collect();
        Self::new(m, points)?.normalize_power()
    }

    /// Adds independent Gaussian jitter of deviation `sigma` to each coordinate.
    pub fn perturbed<R: Rng + ?Sized>(&self, sigma: f64, rng: &mut R) -> Result<Self> {
        let normal = Normal::new(0.0, sigma)
            .map_err(|e| Error::Parameter(format!("perturbation sigma: {e}")))?;
        let points = self
            .points
            .iter()
            .map(|p| Complex64::new(p.re + normal.sample(rng), p.im + normal.sample(rng)))
            .collect();
        Self::new(self.m, points)
    }

    pub fn bits_per_symbol(&self) -> usize {
        self.m
    }

    pub fn order(&self) -> usize {
        self.points.len()
    }

    pub fn points(&self) -> &[Complex64] {
        &self.points
    }

    pub fn point(&self, index: usize) -> Complex64 {
        self.points[index]
    }

    pub fn label(&self, index: usize) -> BitBlock {
        BitBlock::from_index(index, self.m)
    }

    /// Average energy `(1/M) Σ |c_i|²` under a uniform prior.
    pub fn average_power(&self) -> f64 {
        self.points.iter().map(|p| p.norm_sqr()).sum::<f64>() / self.order() as f64
    }

    pub fn normalize_power(&self) -> Result<Self> {
        let power = self.average_power();
        if power == 0.0 {
            return Err(Error::Degenerate("all constellation points are zero".into()));
        }
        let scale = power.sqrt().recip();
        Self::new(self.m, self.points.iter().map(|p| p * scale).collect())
    }

    /// Flat coordinates `[re_0, im_0, re_1, im_1, …]`.
    pub fn to_coords(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.re, p.im]).collect()
    }

    pub fn from_coords(m: usize, coords: &[f64]) -> Result<Self> {
        if coords.len() % 2 != 0 {
            return Err(Error::Shape("odd number of coordinates".into()));
        }
        let points = coords
            .chunks_exact(2)
            .map(|c| Complex64::new(c[0], c[1]))
            .collect();
        Self::new(m, points)
    }

    /// Writes the tab-separated `re im label` table.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("re\tim\tlabel\n");
        for (i, p) in self.points.iter().enumerate() {
            let _ = writeln!(out, "{}\t{}\t{}", p.re, p.im, self.label(i));
        }
        out
    }

    /// Parses the table written by [`Constellation::to_tsv`]. Rows may come
    /// in any order; every label must appear exactly once.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, header)) if header.split('\t').collect::<Vec<_>>() == ["re", "im", "label"] => {}
            _ => return Err(Error::parse("constellation line 1", "expected header `re\\tim\\tlabel`")),
        }
        let mut rows = Vec::new();
        for (n, line) in lines {
            let location = format!("constellation line {}", n + 1);
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::parse(location, "expected 3 tab-separated fields"));
            }
            let re: f64 = fields[0].parse().map_err(|e| Error::parse(&location, format!("re: {e}")))?;
            let im: f64 = fields[1].parse().map_err(|e| Error::parse(&location, format!("im: {e}")))?;
            let label: BitBlock = fields[2].parse()?;
            rows.push((label, Complex64::new(re, im)));
        }
        let m = rows.first().map(|(l, _)| l.len()).unwrap_or(0);
        if m == 0 || m > MAX_BITS_PER_SYMBOL || rows.len() != 1 << m {
            return Err(Error::parse("constellation", format!("{} rows do not form a 2^m constellation", rows.len())));
        }
        let mut points = vec![None; 1 << m];
        for (label, p) in rows {
            if label.len() != m {
                return Err(Error::parse("constellation", "labels of unequal length"));
            }
            let slot = &mut points[label.index()];
            if slot.is_some() {
                return Err(Error::parse("constellation", format!("duplicate label {label}")));
            }
            *slot = Some(p);
        }
        Self::new(m, points.into_iter().map(|p| p.expect("all labels present")).collect())
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_tsv())?)
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        Self::from_tsv(&std::fs::read_to_string(path)?)
    }
}

fn gray_decode(mut g: usize) -> usize {
    let mut b = g;
    while g > 0 {
        g >>= 1;
        b ^= g;
    }
    b
}

pub fn gray_encode(b: usize) -> usize {
    b ^ (b >> 1)
}

/// Transmit symbol for a one-hot vector: the dot product with the points.
pub fn map_symbols(onehot: &OneHot, c: &Constellation) -> Result<Complex64> {
    if onehot.len() != c.order() {
        return Err(Error::Shape(format!(
            "one-hot of length {} for {} points",
            onehot.len(),
            c.order()
        )));
    }
    Ok(onehot
        .to_vec()
        .iter()
        .zip(c.points())
        .map(|(w, p)| p * w)
        .sum())
}

/// Differentiable counterpart of [`map_symbols`]. The dot product with a
/// basis vector selects one point, so its gradient flows to that point only.
pub fn map_symbols_tape(onehot: &OneHot, points: &[CVar]) -> Result<CVar> {
    if onehot.len() != points.len() {
        return Err(Error::Shape(format!(
            "one-hot of length {} for {} points",
            onehot.len(),
            points.len()
        )));
    }
    Ok(points[onehot.hot()])
}

/// Power normalization recorded on the tape.
pub fn normalize_power_tape(tape: &mut Tape, points: &[CVar]) -> Result<Vec<CVar>> {
    let squares = points
        .iter()
        .map(|&p| tape.cabs2(p))
        .collect::<Result<Vec<_>>>()?;
    let power = tape.mean(&squares)?;
    if tape.value(power) == 0.0 {
        return Err(Error::Degenerate("all constellation points are zero".into()));
    }
    let root = tape.sqrt(power)?;
    let one = tape.leaf(1.0)?;
    let scale = tape.div(one, root)?;
    points
        .iter()
        .map(|&p| {
            Ok(CVar {
                re: tape.mul(p.re, scale)?,
                im: tape.mul(p.im, scale)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn onehot_index_is_msb_first() {
        let hot = |bits: Vec<u8>| {
            let m = bits.len();
            bits_to_onehot(&BitBlock::new(bits).unwrap(), m).unwrap()
        };
        assert_eq!(hot(vec![0, 0]).hot(), 0);
        assert_eq!(hot(vec![1, 0]).hot(), 2);
        let h = hot(vec![1; 6]);
        assert_eq!(h.hot(), 63);
        assert_eq!(h.to_vec().iter().filter(|&&x| x == 1.0).count(), 1);
        assert!(matches!(
            bits_to_onehot(&BitBlock::new(vec![1, 0, 1]).unwrap(), 2),
            Err(Error::Shape(_))
        ));
        assert!(BitBlock::new(vec![0, 2]).is_err());
    }

    #[test]
    fn label_round_trip_is_exhaustive() {
        for m in 1..=6 {
            for i in 0..1usize << m {
                let bits = BitBlock::from_index(i, m);
                let oh = bits_to_onehot(&bits, m).unwrap();
                assert_eq!(BitBlock::from_index(oh.hot(), m), bits);
            }
        }
    }

    #[test]
    fn map_symbols_selects_hot_point() {
        let mut points = vec![Complex64::new(0.5, 0.5); 4];
        points[0] = Complex64::new(1.0, 0.0);
        let c = Constellation::new(2, points).unwrap();
        let x = map_symbols(&OneHot::new(4, 0).unwrap(), &c).unwrap();
        assert_eq!(x, Complex64::new(1.0, 0.0));

        let qam = Constellation::square_qam(6).unwrap();
        let corner = map_symbols(&OneHot::new(64, 63).unwrap(), &qam).unwrap();
        assert_eq!(corner, qam.point(63));
        // label 111 decodes to Gray level 5 on each axis: amplitude 2*5-7 = 3
        let unit = (42.0f64).sqrt().recip();
        assert!((corner.re - 3.0 * unit).abs() < 1e-15);
        assert!((corner.im - 3.0 * unit).abs() < 1e-15);
    }

    #[test]
    fn map_symbols_gradient_is_a_basis_vector() {
        let mut tape = Tape::new();
        let points: Vec<CVar> = (0..4)
            .map(|i| tape.complex_leaf(i as f64, -(i as f64)).unwrap())
            .collect();
        let x = map_symbols_tape(&OneHot::new(4, 2).unwrap(), &points).unwrap();
        let y = tape.scale(x.re, 1.0).unwrap();
        tape.backward(y).unwrap();
        for (i, p) in points.iter().enumerate() {
            assert_eq!(tape.grad(p.re), if i == 2 { 1.0 } else { 0.0 });
            assert_eq!(tape.grad(p.im), 0.0);
        }
    }

    #[test]
    fn normalization_examples() {
        let points: Vec<Complex64> = (0..4)
            .map(|i| Complex64::from_polar(2.0, i as f64))
            .collect();
        let c = Constellation::new(2, points).unwrap().normalize_power().unwrap();
        for p in c.points() {
            assert!((p.norm() - 1.0).abs() < 1e-12);
        }
        let again = c.normalize_power().unwrap();
        for (a, b) in c.points().iter().zip(again.points()) {
            assert!((a - b).norm() < 1e-12);
        }
        let zero = Constellation::new(2, vec![Complex64::new(0.0, 0.0); 4]).unwrap();
        assert!(matches!(zero.normalize_power(), Err(Error::Degenerate(_))));
    }

    #[test]
    fn random_constellation_normalizes_to_unit_power() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let points: Vec<Complex64> = (0..64)
            .map(|_| Complex64::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)))
            .collect();
        let c = Constellation::new(6, points).unwrap().normalize_power().unwrap();
        let power: f64 = c.points().iter().map(|p| p.re * p.re + p.im * p.im).sum::<f64>() / 64.0;
        assert!((power - 1.0).abs() < 1e-9);
    }

    #[test]
    fn tape_normalization_matches_plain_and_has_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let coords: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
        let plain = Constellation::from_coords(3, &coords).unwrap().normalize_power().unwrap();
        let mut tape = Tape::new();
        let vars = tape.leaves(&coords).unwrap();
        let points: Vec<CVar> = vars.chunks(2).map(|c| CVar { re: c[0], im: c[1] }).collect();
        let normed = normalize_power_tape(&mut tape, &points).unwrap();
        for (n, p) in normed.iter().zip(plain.points()) {
            assert!((tape.cvalue(*n) - p).norm() < 1e-14);
        }
        let check = crate::numerics::gradcheck(
            |t, v| {
                let pts: Vec<CVar> = v.chunks(2).map(|c| CVar { re: c[0], im: c[1] }).collect();
                let n = normalize_power_tape(t, &pts)?;
                let a = t.mul(n[0].re, n[1].im)?;
                t.add(a, n[5].re)
            },
            &coords,
            1e-5,
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-6);
    }

    #[test]
    fn square_qam_examples() {
        let qpsk = Constellation::square_qam(2).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        for p in qpsk.points() {
            assert!((p.re.abs() - r).abs() < 1e-15 && (p.im.abs() - r).abs() < 1e-15);
        }
        let qam16 = Constellation::square_qam(4).unwrap();
        let unit = qam16.points().iter().map(|p| p.re.abs()).fold(f64::INFINITY, f64::min);
        let mut levels: Vec<i64> = qam16.points().iter().map(|p| (p.re / unit).round() as i64).collect();
        levels.sort();
        levels.dedup();
        assert_eq!(levels, vec![-3, -1, 1, 3]);
        assert!((qam16.average_power() - 1.0).abs() < 1e-12);
        assert!(matches!(Constellation::square_qam(5), Err(Error::Parameter(_))));
    }

    #[test]
    fn square_qam_grid_neighbors_differ_in_one_bit() {
        let qam = Constellation::square_qam(6).unwrap();
        let step = 2.0 / 42.0f64.sqrt();
        let mut checked = 0;
        for i in 0..64 {
            for j in 0..64 {
                let d = qam.point(i) - qam.point(j);
                let adjacent = ((d.re.abs() - step).abs() < 1e-9 && d.im.abs() < 1e-9)
                    || ((d.im.abs() - step).abs() < 1e-9 && d.re.abs() < 1e-9);
                if adjacent {
                    assert_eq!((i ^ j).count_ones(), 1, "{i} vs {j}");
                    checked += 1;
                }
            }
        }
        // 2 axes * 8 lines * 7 neighbor pairs, counted in both directions
        assert_eq!(checked, 2 * 8 * 7 * 2);
    }

    #[test]
    fn tsv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = Constellation::square_qam(6).unwrap().perturbed(0.01, &mut rng).unwrap();
        let text = c.to_tsv();
        assert_eq!(text.lines().count(), 65);
        assert!(text.lines().nth(64).unwrap().ends_with("\t111111"));
        assert_eq!(Constellation::from_tsv(&text).unwrap(), c);
        assert!(Constellation::from_tsv("x\ty\n").is_err());
    }

    proptest! {
        #[test]
        fn mapping_is_linear_in_points(
            a in proptest::collection::vec(-2.0f64..2.0, 16),
            b in proptest::collection::vec(-2.0f64..2.0, 16),
            t in 0.0f64..1.0,
            hot in 0usize..8,
        ) {
            let ca = Constellation::from_coords(3, &a).unwrap();
            let cb = Constellation::from_coords(3, &b).unwrap();
            let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| t * x + (1.0 - t) * y).collect();
            let cm = Constellation::from_coords(3, &mix).unwrap();
            let oh = OneHot::new(8, hot).unwrap();
            let lhs = map_symbols(&oh, &cm).unwrap();
            let rhs = map_symbols(&oh, &ca).unwrap() * t + map_symbols(&oh, &cb).unwrap() * (1.0 - t);
            prop_assert!((lhs - rhs).norm() < 1e-12);
        }

        #[test]
        fn square_qam_is_gray_per_axis(half in 1usize..=4) {
            let m = 2 * half;
            let qam = Constellation::square_qam(m).unwrap();
            let side = 1usize << half;
            // in-phase amplitude depends only on the first half of the label
            let mut by_level: Vec<(f64, usize)> = (0..side)
                .map(|h| (qam.point(h << half).re, h))
                .collect();
            by_level.sort_by(|x, y| x.0.total_cmp(&y.0));
            for w in by_level.windows(2) {
                prop_assert_eq!((w[0].1 ^ w[1].1).count_ones(), 1);
            }
            for i in 0..qam.order() {
                prop_assert_eq!(qam.point(i).re, qam.point((i >> half) << half).re);
            }
        }
    }
}
