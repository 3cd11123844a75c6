//! Brute-force density-matrix simulation of the two-pair circuits.
//!
//! This is deliberately slow and literal: it builds the 16x16 joint state of
//! two Werner pairs, applies the gates and projective measurements one by one,
//! and reads fidelities off the reduced 4x4 states. None of it reuses the
//! closed forms in the parent module.
//!
//! All circuits involved (CNOT, H, X, Z, Z-basis measurement) keep a real
//! density matrix real, so entries are plain `f64`.

use serde::Serialize;

use super::Fidelity;

/// Which circuit to run on the pair of pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TwoPairCircuit {
    /// Bilateral CNOT, Z measurement of both target qubits.
    Purify,
    /// Bell-state measurement on the two middle qubits with Pauli frame
    /// correction applied at the far end.
    Swap,
}

/// Dense real density matrix over `n` qubits. Qubit 0 is the most
/// significant bit of the basis index.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    qubits: usize,
    data: Vec<f64>,
}

impl DensityMatrix {
    pub fn dim(&self) -> usize {
        1 << self.qubits
    }

    pub fn qubits(&self) -> usize {
        self.qubits
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.dim() + c]
    }

    fn at(&mut self, r: usize, c: usize) -> &mut f64 {
        let d = self.dim();
        &mut self.data[r * d + c]
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim()).map(|i| self.get(i, i)).sum()
    }

    /// Two-qubit Werner state around |Φ+⟩ = (|00⟩ + |11⟩)/√2.
    pub fn werner(f: Fidelity) -> Self {
        let f = f.value();
        let noise = (1.0 - f) / 3.0;
        let mut m = DensityMatrix {
            qubits: 2,
            data: vec![0.0; 16],
        };
        for i in 0..4 {
            *m.at(i, i) = noise;
        }
        // add (f - noise) |Φ+⟩⟨Φ+|
        let k = (f - noise) / 2.0;
        for &r in &[0usize, 3] {
            for &c in &[0usize, 3] {
                *m.at(r, c) += k;
            }
        }
        m
    }

    pub fn tensor(&self, other: &DensityMatrix) -> DensityMatrix {
        let (da, db) = (self.dim(), other.dim());
        let d = da * db;
        let mut data = vec![0.0; d * d];
        for ra in 0..da {
            for ca in 0..da {
                let a = self.get(ra, ca);
                if a == 0.0 {
                    continue;
                }
                for rb in 0..db {
                    for cb in 0..db {
                        data[(ra * db + rb) * d + (ca * db + cb)] = a * other.get(rb, cb);
                    }
                }
            }
        }
        DensityMatrix {
            qubits: self.qubits + other.qubits,
            data,
        }
    }

    fn bit(&self, q: usize) -> usize {
        1 << (self.qubits - 1 - q)
    }

    /// Conjugate by a permutation of basis states (ρ → PρPᵀ).
    fn permute(&mut self, perm: impl Fn(usize) -> usize) {
        let d = self.dim();
        let mut out = vec![0.0; d * d];
        for r in 0..d {
            for c in 0..d {
                out[perm(r) * d + perm(c)] = self.get(r, c);
            }
        }
        self.data = out;
    }

    pub fn cnot(&mut self, control: usize, target: usize) {
        let (cb, tb) = (self.bit(control), self.bit(target));
        self.permute(|i| if i & cb != 0 { i ^ tb } else { i });
    }

    pub fn x(&mut self, q: usize) {
        let b = self.bit(q);
        self.permute(|i| i ^ b);
    }

    pub fn z(&mut self, q: usize) {
        let b = self.bit(q);
        let d = self.dim();
        for r in 0..d {
            for c in 0..d {
                let sign = if ((r & b != 0) as u8 ^ (c & b != 0) as u8) == 1 {
                    -1.0
                } else {
                    1.0
                };
                *self.at(r, c) *= sign;
            }
        }
    }

    /// Apply a real single-qubit unitary `u` (row-major 2x2).
    fn single(&mut self, q: usize, u: [[f64; 2]; 2]) {
        let b = self.bit(q);
        let d = self.dim();
        // left multiply: rows
        let mut tmp = self.data.clone();
        for r in 0..d {
            let r0 = r & !b;
            let r1 = r | b;
            let hi = (r & b != 0) as usize;
            for c in 0..d {
                tmp[r * d + c] = u[hi][0] * self.get(r0, c) + u[hi][1] * self.get(r1, c);
            }
        }
        // right multiply by uᵀ: columns
        let mut out = tmp.clone();
        for c in 0..d {
            let c0 = c & !b;
            let c1 = c | b;
            let hi = (c & b != 0) as usize;
            for r in 0..d {
                out[r * d + c] = tmp[r * d + c0] * u[hi][0] + tmp[r * d + c1] * u[hi][1];
            }
        }
        self.data = out;
    }

    pub fn h(&mut self, q: usize) {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        self.single(q, [[s, s], [s, -s]]);
    }

    /// Project qubit `q` onto |outcome⟩. Returns the branch probability and
    /// the normalized post-measurement state (unchanged if probability is 0).
    pub fn measure_z(&self, q: usize, outcome: u8) -> (f64, DensityMatrix) {
        let b = self.bit(q);
        let keep = |i: usize| ((i & b != 0) as u8) == outcome;
        let d = self.dim();
        let mut out = self.clone();
        for r in 0..d {
            for c in 0..d {
                if !(keep(r) && keep(c)) {
                    *out.at(r, c) = 0.0;
                }
            }
        }
        let p = out.trace();
        if p > 0.0 {
            out.data.iter_mut().for_each(|v| *v /= p);
        }
        (p, out)
    }

    /// Trace out every qubit not listed in `keep` (which must be sorted).
    pub fn reduce(&self, keep: &[usize]) -> DensityMatrix {
        let n = self.qubits;
        let traced: Vec<usize> = (0..n).filter(|q| !keep.contains(q)).collect();
        let kd = 1usize << keep.len();
        let td = 1usize << traced.len();
        let compose = |k: usize, t: usize| -> usize {
            let mut idx = 0;
            for (j, &q) in keep.iter().enumerate() {
                if k & (1 << (keep.len() - 1 - j)) != 0 {
                    idx |= self.bit(q);
                }
            }
            for (j, &q) in traced.iter().enumerate() {
                if t & (1 << (traced.len() - 1 - j)) != 0 {
                    idx |= self.bit(q);
                }
            }
            idx
        };
        let mut data = vec![0.0; kd * kd];
        for r in 0..kd {
            for c in 0..kd {
                data[r * kd + c] = (0..td).map(|t| self.get(compose(r, t), compose(c, t))).sum();
            }
        }
        DensityMatrix {
            qubits: keep.len(),
            data,
        }
    }

    /// ⟨Φ+|ρ|Φ+⟩ for a two-qubit state.
    pub fn bell_fidelity(&self) -> f64 {
        assert_eq!(self.qubits, 2);
        (self.get(0, 0) + self.get(0, 3) + self.get(3, 0) + self.get(3, 3)) / 2.0
    }

    /// Single-qubit depolarizing channel with survival parameter `lambda`,
    /// written as a Pauli twirl: λρ + (1-λ)/4 Σ_P PρP.
    pub fn depolarize(&mut self, q: usize, lambda: f64) {
        let mut sum = vec![0.0; self.data.len()];
        let mut add = |m: &DensityMatrix| {
            for (s, v) in sum.iter_mut().zip(&m.data) {
                *s += v / 4.0;
            }
        };
        add(self);
        let mut xm = self.clone();
        xm.x(q);
        add(&xm);
        let mut zm = self.clone();
        zm.z(q);
        add(&zm);
        // Y ρ Y† = (XZ) ρ (XZ)†
        let mut ym = self.clone();
        ym.z(q);
        ym.x(q);
        add(&ym);
        for (v, s) in self.data.iter_mut().zip(sum) {
            *v = lambda * *v + (1.0 - lambda) * s;
        }
    }
}

/// One measurement branch of a two-pair circuit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Branch {
    pub outcome: (u8, u8),
    pub probability: f64,
    /// Fidelity of the surviving pair in this branch, after the Pauli frame
    /// correction for swaps.
    pub fidelity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TwoPairOutcome {
    pub circuit: TwoPairCircuit,
    pub f1: f64,
    pub f2: f64,
    pub branches: Vec<Branch>,
}

impl TwoPairOutcome {
    /// Total probability of even-parity (matching) outcomes.
    pub fn even_probability(&self) -> f64 {
        self.branches
            .iter()
            .filter(|b| b.outcome.0 == b.outcome.1)
            .map(|b| b.probability)
            .sum()
    }

    /// Fidelity of the kept pair conditioned on even parity.
    pub fn even_fidelity(&self) -> f64 {
        let p = self.even_probability();
        self.branches
            .iter()
            .filter(|b| b.outcome.0 == b.outcome.1)
            .map(|b| b.probability * b.fidelity)
            .sum::<f64>()
            / p
    }

    /// Probability-weighted fidelity over all branches.
    pub fn mean_fidelity(&self) -> f64 {
        self.branches.iter().map(|b| b.probability * b.fidelity).sum()
    }

    /// Line-delimited JSON, one record per branch, for fixtures.
    pub fn to_records(&self) -> String {
        let mut out = String::new();
        for b in &self.branches {
            let rec = serde_json::json!({
                "circuit": self.circuit,
                "f1": self.f1,
                "f2": self.f2,
                "outcome": [b.outcome.0, b.outcome.1],
                "probability": b.probability,
                "fidelity": b.fidelity,
            });
            out.push_str(&rec.to_string());
            out.push('\n');
        }
        out
    }
}

/// Run `circuit` exactly on two Werner pairs of fidelity `f1`, `f2`.
pub fn oracle_two_pair(f1: Fidelity, f2: Fidelity, circuit: TwoPairCircuit) -> TwoPairOutcome {
    let joint = DensityMatrix::werner(f1).tensor(&DensityMatrix::werner(f2));
    let mut branches = Vec::with_capacity(4);
    match circuit {
        TwoPairCircuit::Purify => {
            // qubits: 0=A1 1=B1 (pair 1), 2=A2 3=B2 (pair 2)
            let mut rho = joint;
            rho.cnot(0, 2);
            rho.cnot(1, 3);
            for ma in 0..2u8 {
                let (pa, ra) = rho.measure_z(2, ma);
                for mb in 0..2u8 {
                    let (pb, rb) = ra.measure_z(3, mb);
                    let prob = pa * pb;
                    let fid = if prob > 0.0 {
                        rb.reduce(&[0, 1]).bell_fidelity()
                    } else {
                        0.0
                    };
                    branches.push(Branch {
                        outcome: (ma, mb),
                        probability: prob,
                        fidelity: fid,
                    });
                }
            }
        }
        TwoPairCircuit::Swap => {
            // qubits: 0=A 1=B1 (pair A-B), 2=B2 3=C (pair B-C)
            let mut rho = joint;
            rho.cnot(1, 2);
            rho.h(1);
            for m1 in 0..2u8 {
                let (p1, r1) = rho.measure_z(1, m1);
                for m2 in 0..2u8 {
                    let (p2, r2) = r1.measure_z(2, m2);
                    let prob = p1 * p2;
                    let mut fixed = r2;
                    if m2 == 1 {
                        fixed.x(3);
                    }
                    if m1 == 1 {
                        fixed.z(3);
                    }
                    let fid = if prob > 0.0 {
                        fixed.reduce(&[0, 3]).bell_fidelity()
                    } else {
                        0.0
                    };
                    branches.push(Branch {
                        outcome: (m1, m2),
                        probability: prob,
                        fidelity: fid,
                    });
                }
            }
        }
    }
    TwoPairOutcome {
        circuit,
        f1: f1.value(),
        f2: f2.value(),
        branches,
    }
}

/// Z⊗Z mismatch probability read off the Werner density matrix.
pub fn oracle_qber_z(f: Fidelity) -> f64 {
    let rho = DensityMatrix::werner(f);
    rho.get(1, 1) + rho.get(2, 2)
}

/// Fidelity after applying a depolarizing channel with survival `lambda` to
/// one half of a Werner pair.
pub fn oracle_depolarize_one_half(f: Fidelity, lambda: f64) -> f64 {
    let mut rho = DensityMatrix::werner(f);
    rho.depolarize(1, lambda);
    rho.bell_fidelity()
}
