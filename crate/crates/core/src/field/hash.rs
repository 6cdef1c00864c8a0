//! Multiresolution hash-grid encoding of points in the unit cube.

use crate::geometry::Vec3;

const PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

/// Static description of the grid; the tables themselves live in the
/// model's flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct HashGrid {
    pub table_size: usize,
    pub features: usize,
    pub resolutions: Vec<usize>,
}

/// Table offsets and blend weights of the 8 corners, per level.
#[derive(Debug, Clone, Default)]
pub struct HashCache {
    pub offsets: Vec<[usize; 8]>,
    pub weights: Vec<[f64; 8]>,
}

impl HashGrid {
    pub fn new(levels: usize, table_size: usize, features: usize, base: usize, scale: f64) -> Self {
        let resolutions = (0..levels)
            .map(|l| (base as f64 * scale.powi(l as i32)).floor() as usize)
            .collect();
        HashGrid {
            table_size,
            features,
            resolutions,
        }
    }

    pub fn levels(&self) -> usize {
        self.resolutions.len()
    }

    pub fn output_width(&self) -> usize {
        self.levels() * self.features
    }

    pub fn num_params(&self) -> usize {
        self.levels() * self.table_size * self.features
    }

    pub fn new_cache(&self) -> HashCache {
        HashCache {
            offsets: vec![[0; 8]; self.levels()],
            weights: vec![[0.0; 8]; self.levels()],
        }
    }

    /// Slot of lattice corner `c` at `level`. Coarse levels that fit in the
    /// table are indexed densely; finer ones use the XOR-of-primes hash.
    #[inline]
    pub fn slot(&self, level: usize, c: [u32; 3]) -> usize {
        let side = self.resolutions[level] + 1;
        let dense = side.checked_pow(3).is_some_and(|n| n <= self.table_size);
        if dense {
            c[0] as usize + side * (c[1] as usize + side * c[2] as usize)
        } else {
            let h = c[0].wrapping_mul(PRIMES[0]) ^ c[1].wrapping_mul(PRIMES[1]) ^ c[2].wrapping_mul(PRIMES[2]);
            h as usize % self.table_size
        }
    }

    /// Writes `levels × features` values into `out`.
    pub fn encode(&self, tables: &[f64], p: &Vec3, out: &mut [f64], cache: &mut HashCache) {
        let p = p.map(|x| if x.is_nan() { 0.0 } else { x.clamp(0.0, 1.0) });
        let f = self.features;
        for level in 0..self.levels() {
            let res = self.resolutions[level] as f64;
            let pos = p.map(|x| x * res);
            let base = pos.map(|x| x.floor());
            let frac = [0, 1, 2].map(|a| pos[a] - base[a]);
            let base = base.map(|x| x as u32);
            let level_offset = level * self.table_size;
            let offsets = &mut cache.offsets[level];
            let weights = &mut cache.weights[level];
            for corner in 0..8 {
                let bit = |a: usize| ((corner >> a) & 1) as u32;
                let c = [base[0] + bit(0), base[1] + bit(1), base[2] + bit(2)];
                let mut w = 1.0;
                for a in 0..3 {
                    w *= if bit(a) == 1 { frac[a] } else { 1.0 - frac[a] };
                }
                offsets[corner] = (level_offset + self.slot(level, c)) * f;
                weights[corner] = w;
            }
            let dst = &mut out[level * f..(level + 1) * f];
            dst.fill(0.0);
            for corner in 0..8 {
                let entry = &tables[offsets[corner]..offsets[corner] + f];
                for (d, e) in dst.iter_mut().zip(entry) {
                    *d += weights[corner] * e;
                }
            }
        }
    }

    /// Accumulate `d_out` (gradient w.r.t. the encoding) into table gradients.
    pub fn backward(&self, cache: &HashCache, d_out: &[f64], grad_tables: &mut [f64]) {
        let f = self.features;
        for level in 0..self.levels() {
            let d = &d_out[level * f..(level + 1) * f];
            if d.iter().all(|&x| x == 0.0) {
                continue;
            }
            for corner in 0..8 {
                let w = cache.weights[level][corner];
                let off = cache.offsets[level][corner];
                for (g, dv) in grad_tables[off..off + f].iter_mut().zip(d) {
                    *g += w * dv;
                }
            }
        }
    }
}
