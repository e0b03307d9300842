//! Host-side golden models: the O(n²) DFT-sum transform, the iterative
//! increasing-distance dataflow the bank executes, inverse transform, bit
//! reversal and negacyclic polynomial multiplication.

use thiserror::Error;

use crate::modmath::{find_root_of_unity, is_ntt_friendly, ModError, Modulus};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NttError {
    #[error("{w} is not a primitive root of order {n} modulo {q}")]
    BadRoot { w: u32, n: usize, q: u32 },
    #[error("length {got} does not match plan size {expected}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("size {0} is not a power of two >= 2")]
    BadSize(usize),
    #[error("no twiddle table / permutation reproduces the DFT for n={0}")]
    PlanValidationFailed(usize),
    #[error("modulus {q} does not support a negacyclic transform of size {n}")]
    NotNttFriendly { q: u32, n: usize },
    #[error(transparent)]
    Mod(#[from] ModError),
}

/// Polynomial coefficient vector, all entries in `[0, q)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Poly(pub Vec<u32>);

impl Poly {
    pub fn zero(n: usize) -> Self {
        Poly(vec![0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn coeffs(&self) -> &[u32] {
        &self.0
    }
}

impl From<Vec<u32>> for Poly {
    fn from(v: Vec<u32>) -> Self {
        Poly(v)
    }
}

/// Reverses the low `bits` bits of `x`.
#[inline]
pub fn reverse_bits(x: usize, bits: u32) -> usize {
    if bits == 0 {
        0
    } else {
        x.reverse_bits() >> (usize::BITS - bits)
    }
}

/// Moves element `i` to index `reverse_bits(i, log2 n)`.
pub fn bit_reverse_permute(a: &Poly) -> Poly {
    let n = a.len();
    assert!(n.is_power_of_two(), "length must be a power of two");
    let bits = n.trailing_zeros();
    let mut out = vec![0; n];
    for (i, &x) in a.0.iter().enumerate() {
        out[reverse_bits(i, bits)] = x;
    }
    Poly(out)
}

fn check_root(m: &Modulus, w: u32, n: usize) -> Result<(), NttError> {
    let ok = n >= 1 && m.pow(w, n as u64) == 1 && (n == 1 || m.pow(w, n as u64 / 2) != 1);
    if ok {
        Ok(())
    } else {
        Err(NttError::BadRoot { w, n, q: m.value() })
    }
}

/// `A_k = Σ_j a_j w^{jk}` evaluated directly.
pub fn ntt_direct(a: &Poly, m: &Modulus, w: u32) -> Result<Poly, NttError> {
    let n = a.len();
    check_root(m, w, n)?;
    let q = m.value() as u64;
    let mut powers = Vec::with_capacity(n);
    let mut x = 1u64;
    for _ in 0..n {
        powers.push(x);
        x = x * w as u64 % q;
    }
    let out = (0..n)
        .map(|k| {
            let mut acc = 0u64;
            let mut idx = 0usize;
            for &aj in &a.0 {
                acc += aj as u64 * powers[idx];
                // keep headroom: each term < 2^62
                if acc >= 1 << 62 {
                    acc %= q;
                }
                idx += k;
                if idx >= n {
                    idx -= n;
                }
            }
            (acc % q) as u32
        })
        .collect();
    Ok(Poly(out))
}

/// Which side of the butterfly network the bit-reversal permutation sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PermutationSide {
    /// `ntt_direct(a) = permute(ntt_iterative(a))`
    Output,
    /// `ntt_direct(a) = ntt_iterative(permute(a))`
    Input,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// An explicit, validated twiddle table for the increasing-distance
/// Gentleman–Sande network of size `n`.
///
/// `twiddles[s-1][i]` is the twiddle of butterfly `i` at stage `s`, where
/// butterflies are numbered by their lower index `p` as
/// `(p / 2m)·m + p % m` with distance `m = 2^(s−1)`.
#[derive(Debug, Clone)]
pub struct NttPlan {
    n: usize,
    modulus: Modulus,
    root: u32,
    direction: Direction,
    side: PermutationSide,
    twiddles: Vec<Vec<u32>>,
    n_inv: u32,
}

/// Candidate twiddle rule for a given permutation convention.
type TwiddleRule = fn(&Modulus, u32, usize, u32, usize) -> u32;

// Input-side reversal: w^(m · rev_{L−s}(p >> s)).
fn rule_input_reversed(m: &Modulus, w: u32, n: usize, stage: u32, p: usize) -> u32 {
    let log_n = n.trailing_zeros();
    let dist = 1usize << (stage - 1);
    let e = dist * reverse_bits(p >> stage, log_n - stage);
    m.pow(w, e as u64)
}

// Output-side reversal: decimation-in-time style w^((n/2m)·(p mod m)).
fn rule_output_reversed(m: &Modulus, w: u32, n: usize, stage: u32, p: usize) -> u32 {
    let dist = 1usize << (stage - 1);
    m.pow(w, ((n / (2 * dist)) * (p % dist)) as u64)
}

const CANDIDATES: [(PermutationSide, TwiddleRule); 2] = [
    (PermutationSide::Output, rule_output_reversed),
    (PermutationSide::Input, rule_input_reversed),
];

/// Largest size whose plan is validated exhaustively on the delta basis.
pub const VALIDATION_LIMIT: usize = 64;

impl NttPlan {
    /// Builds a forward plan for size `n` with the smallest primitive
    /// `n`-th root of unity.
    pub fn forward(n: usize, m: Modulus) -> Result<Self, NttError> {
        if n < 2 || !n.is_power_of_two() {
            return Err(NttError::BadSize(n));
        }
        let w = find_root_of_unity(&m, n as u64)?;
        Self::build(n, m, w, Direction::Forward)
    }

    /// The inverse of [`NttPlan::forward`] for the same `(n, q)`.
    pub fn inverse(n: usize, m: Modulus) -> Result<Self, NttError> {
        if n < 2 || !n.is_power_of_two() {
            return Err(NttError::BadSize(n));
        }
        let w = find_root_of_unity(&m, n as u64)?;
        Self::build(n, m, m.inv(w)?, Direction::Inverse)
    }

    /// Derives the twiddle table and permutation side for root `w`.
    ///
    /// Each candidate convention is checked against [`ntt_direct`] on the
    /// full delta basis at size `min(n, VALIDATION_LIMIT)`; the first that
    /// reproduces it is used for `n`.
    pub fn build(n: usize, m: Modulus, w: u32, direction: Direction) -> Result<Self, NttError> {
        if n < 2 || !n.is_power_of_two() {
            return Err(NttError::BadSize(n));
        }
        check_root(&m, w, n)?;
        let vn = n.min(VALIDATION_LIMIT);
        let vw = m.pow(w, (n / vn) as u64);
        for (side, rule) in CANDIDATES {
            let small = Self::with_rule(vn, m, vw, direction, side, rule)?;
            if small.validate_delta_basis() {
                return Self::with_rule(n, m, w, direction, side, rule);
            }
        }
        Err(NttError::PlanValidationFailed(n))
    }

    fn with_rule(
        n: usize,
        m: Modulus,
        w: u32,
        direction: Direction,
        side: PermutationSide,
        rule: TwiddleRule,
    ) -> Result<Self, NttError> {
        let log_n = n.trailing_zeros();
        let mut twiddles = Vec::with_capacity(log_n as usize);
        for stage in 1..=log_n {
            let dist = 1usize << (stage - 1);
            let row = (0..n / 2)
                .map(|i| {
                    let p = (i / dist) * 2 * dist + i % dist;
                    rule(&m, w, n, stage, p)
                })
                .collect();
            twiddles.push(row);
        }
        Ok(NttPlan {
            n,
            modulus: m,
            root: w,
            direction,
            side,
            twiddles,
            n_inv: m.inv(n as u32 % m.value())?,
        })
    }

    fn validate_delta_basis(&self) -> bool {
        (0..self.n).all(|j| {
            let mut delta = Poly::zero(self.n);
            delta.0[j] = 1;
            let direct = ntt_direct(&delta, &self.modulus, self.root).expect("root checked");
            self.transform(&delta).map(|t| t == direct).unwrap_or(false)
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn log_n(&self) -> u32 {
        self.n.trailing_zeros()
    }

    pub fn modulus(&self) -> &Modulus {
        &self.modulus
    }

    pub fn root(&self) -> u32 {
        self.root
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn permutation_side(&self) -> PermutationSide {
        self.side
    }

    pub fn n_inv(&self) -> u32 {
        self.n_inv
    }

    /// Twiddle of the butterfly whose lower element sits at index `p` in
    /// stage `stage` (1-based).
    pub fn twiddle_at(&self, stage: u32, p: usize) -> u32 {
        let dist = 1usize << (stage - 1);
        debug_assert!(p % (2 * dist) < dist, "p must be a lower index");
        self.twiddles[stage as usize - 1][(p / (2 * dist)) * dist + p % dist]
    }

    pub fn stage_twiddles(&self, stage: u32) -> &[u32] {
        &self.twiddles[stage as usize - 1]
    }

    /// The plan's bit-reversal permutation (an involution).
    pub fn permute(&self, a: &Poly) -> Poly {
        bit_reverse_permute(a)
    }

    /// Iterative network followed or preceded by the permutation:
    /// equals the DFT sum with this plan's root.
    pub fn transform(&self, a: &Poly) -> Result<Poly, NttError> {
        match self.side {
            PermutationSide::Input => ntt_iterative(&self.permute(a), self),
            PermutationSide::Output => Ok(self.permute(&ntt_iterative(a, self)?)),
        }
    }
}

/// Runs the increasing-distance butterfly network in place on a copy of `a`,
/// with no permutation. This is exactly what the bank computes.
pub fn ntt_iterative(a: &Poly, plan: &NttPlan) -> Result<Poly, NttError> {
    if a.len() != plan.n {
        return Err(NttError::SizeMismatch {
            expected: plan.n,
            got: a.len(),
        });
    }
    let m = &plan.modulus;
    let mut x = a.0.clone();
    for stage in 1..=plan.log_n() {
        let dist = 1usize << (stage - 1);
        let tw = plan.stage_twiddles(stage);
        let mut i = 0;
        for block in (0..plan.n).step_by(2 * dist) {
            for p in block..block + dist {
                let (u, v) = m.butterfly(x[p], x[p + dist], tw[i]);
                x[p] = u;
                x[p + dist] = v;
                i += 1;
            }
        }
    }
    Ok(Poly(x))
}

/// Forward transform (permutation included) with the plan's root.
pub fn ntt(a: &Poly, plan: &NttPlan) -> Result<Poly, NttError> {
    plan.transform(a)
}

/// Inverse of [`ntt`] for a forward plan, including the `n⁻¹` scaling.
/// `plan` must be the matching inverse plan.
pub fn intt(a: &Poly, plan: &NttPlan) -> Result<Poly, NttError> {
    let m = plan.modulus;
    let t = plan.transform(a)?;
    Ok(Poly(t.0.iter().map(|&x| m.mul(x, plan.n_inv)).collect()))
}

/// Direct negacyclic convolution: `a·b mod (xⁿ + 1)`.
pub fn polymul_schoolbook(a: &Poly, b: &Poly, m: &Modulus) -> Result<Poly, NttError> {
    let n = a.len();
    if b.len() != n {
        return Err(NttError::SizeMismatch {
            expected: n,
            got: b.len(),
        });
    }
    let mut out = vec![0u32; n];
    for (i, &ai) in a.0.iter().enumerate() {
        for (j, &bj) in b.0.iter().enumerate() {
            let p = m.mul(ai, bj);
            let k = i + j;
            if k < n {
                out[k] = m.add(out[k], p);
            } else {
                out[k - n] = m.sub(out[k - n], p);
            }
        }
    }
    Ok(Poly(out))
}

/// Powers `ψ^0 … ψ^{n−1}` of a primitive `2n`-th root, used to twist a
/// cyclic transform into a negacyclic one.
#[derive(Debug, Clone)]
pub struct NegacyclicTwist {
    psi_pows: Vec<u32>,
    psi_inv_pows: Vec<u32>,
    modulus: Modulus,
}

impl NegacyclicTwist {
    /// `ψ` is chosen so that `ψ² = w`, the root of the forward plan.
    pub fn for_plan(plan: &NttPlan) -> Result<Self, NttError> {
        let m = *plan.modulus();
        let n = plan.n();
        if !is_ntt_friendly(m.value() as u64, n as u64) {
            return Err(NttError::NotNttFriendly { q: m.value(), n });
        }
        let w = match plan.direction() {
            Direction::Forward => plan.root(),
            Direction::Inverse => m.inv(plan.root())?,
        };
        let base = find_root_of_unity(&m, 2 * n as u64)?;
        // base² is a primitive n-th root, so some odd power of base squares to w
        let psi = (0..2 * n as u64)
            .step_by(2)
            .map(|k| m.pow(base, k + 1))
            .find(|&c| m.mul(c, c) == w)
            .ok_or(NttError::NotNttFriendly { q: m.value(), n })?;
        let psi_inv = m.inv(psi)?;
        let pows = |g: u32| {
            let mut v = Vec::with_capacity(n);
            let mut x = 1;
            for _ in 0..n {
                v.push(x);
                x = m.mul(x, g);
            }
            v
        };
        Ok(NegacyclicTwist {
            psi_pows: pows(psi),
            psi_inv_pows: pows(psi_inv),
            modulus: m,
        })
    }

    pub fn twist(&self, a: &Poly) -> Poly {
        let m = &self.modulus;
        Poly(a.0.iter().zip(&self.psi_pows).map(|(&x, &p)| m.mul(x, p)).collect())
    }

    pub fn untwist(&self, a: &Poly) -> Poly {
        let m = &self.modulus;
        Poly(a.0.iter().zip(&self.psi_inv_pows).map(|(&x, &p)| m.mul(x, p)).collect())
    }
}

/// `a·b mod (xⁿ+1)` as `untwist(NTT⁻¹(NTT(twist a) ⊙ NTT(twist b)))`.
pub fn polymul_negacyclic(a: &Poly, b: &Poly, m: &Modulus) -> Result<Poly, NttError> {
    let n = a.len();
    if b.len() != n {
        return Err(NttError::SizeMismatch {
            expected: n,
            got: b.len(),
        });
    }
    if n == 1 {
        return Ok(Poly(vec![m.mul(a.0[0], b.0[0])]));
    }
    if !is_ntt_friendly(m.value() as u64, n as u64) {
        return Err(NttError::NotNttFriendly { q: m.value(), n });
    }
    let fwd = NttPlan::forward(n, *m)?;
    let inv = NttPlan::inverse(n, *m)?;
    let tw = NegacyclicTwist::for_plan(&fwd)?;
    let fa = ntt(&tw.twist(a), &fwd)?;
    let fb = ntt(&tw.twist(b), &fwd)?;
    let prod = Poly(fa.0.iter().zip(&fb.0).map(|(&x, &y)| m.mul(x, y)).collect());
    Ok(tw.untwist(&intt(&prod, &inv)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(q: u64) -> Modulus {
        Modulus::new(q).unwrap()
    }

    fn random_poly(rng: &mut ChaCha8Rng, n: usize, q: u32) -> Poly {
        Poly((0..n).map(|_| rng.gen_range(0..q)).collect())
    }

    #[test]
    fn direct_examples() {
        let m17 = m(17);
        assert_eq!(
            ntt_direct(&Poly(vec![1, 0, 0, 0]), &m17, 4).unwrap().0,
            vec![1, 1, 1, 1]
        );
        assert_eq!(
            ntt_direct(&Poly(vec![0, 1, 0, 0]), &m17, 4).unwrap().0,
            vec![1, 4, 16, 13]
        );
        assert_eq!(
            ntt_direct(&Poly(vec![6; 8]), &m17, 2).unwrap().0,
            vec![(8 * 6) % 17, 0, 0, 0, 0, 0, 0, 0]
        );
        assert!(matches!(
            ntt_direct(&Poly(vec![0; 4]), &m17, 2),
            Err(NttError::BadRoot { .. })
        ));
    }

    #[test]
    fn plan_small_sizes() {
        let p8 = NttPlan::build(8, m(17), 2, Direction::Forward).unwrap();
        for j in 0..8 {
            let mut d = Poly::zero(8);
            d.0[j] = 1;
            assert_eq!(p8.transform(&d).unwrap(), ntt_direct(&d, &m(17), 2).unwrap());
        }
        assert_eq!(p8.permutation_side(), PermutationSide::Input);

        let p2 = NttPlan::forward(2, m(17)).unwrap();
        assert_eq!(p2.stage_twiddles(1), &[1]);
        assert_eq!(p2.permute(&Poly(vec![3, 9])).0, vec![3, 9]);

        // n = 4: the stage-1 row comes out of the validated table.
        let p4 = NttPlan::build(4, m(17), 4, Direction::Forward).unwrap();
        assert_eq!(p4.stage_twiddles(1), &[1, 4]);
        assert_eq!(p4.stage_twiddles(2), &[1, 1]);
    }

    #[test]
    fn iterative_matches_direct_all_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for log_n in 1..=10 {
            let n = 1usize << log_n;
            let q = if n <= 2048 { 12289 } else { 786433 };
            let md = m(q);
            let plan = NttPlan::forward(n, md).unwrap();
            let trials = if n <= 64 { 100 } else { 5 };
            for j in 0..n.min(16) {
                let mut d = Poly::zero(n);
                d.0[j] = 1;
                assert_eq!(plan.transform(&d).unwrap(), ntt_direct(&d, &md, plan.root()).unwrap());
            }
            for _ in 0..trials {
                let a = random_poly(&mut rng, n, q as u32);
                let direct = ntt_direct(&a, &md, plan.root()).unwrap();
                assert_eq!(plan.transform(&a).unwrap(), direct, "n={n}");
            }
        }
    }

    #[test]
    fn iterative_edge_cases() {
        let plan = NttPlan::forward(64, m(12289)).unwrap();
        assert_eq!(ntt_iterative(&Poly::zero(64), &plan).unwrap(), Poly::zero(64));
        assert!(matches!(
            ntt_iterative(&Poly::zero(32), &plan),
            Err(NttError::SizeMismatch { expected: 64, got: 32 })
        ));
    }

    #[test]
    fn inverse_round_trip() {
        let m17 = m(17);
        let f = NttPlan::forward(4, m17).unwrap();
        let i = NttPlan::inverse(4, m17).unwrap();
        let a = Poly(vec![5, 7, 1, 2]);
        assert_eq!(intt(&ntt(&a, &f).unwrap(), &i).unwrap(), a);
        // intt(all-ones) = delta (inverse DFT sum: (1/n)·Σ_k w^{-jk} = [j = 0])
        assert_eq!(intt(&Poly(vec![1; 4]), &i).unwrap().0, vec![1, 0, 0, 0]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for log_n in 1..=9 {
            let n = 1 << log_n;
            let f = NttPlan::forward(n, m(12289)).unwrap();
            let i = NttPlan::inverse(n, m(12289)).unwrap();
            let a = random_poly(&mut rng, n, 12289);
            assert_eq!(intt(&ntt(&a, &f).unwrap(), &i).unwrap(), a);
            let b = random_poly(&mut rng, n, 12289);
            let md = m(12289);
            let sum = Poly(a.0.iter().zip(&b.0).map(|(&x, &y)| md.add(x, y)).collect());
            let lhs = intt(&sum, &i).unwrap();
            let (ia, ib) = (intt(&a, &i).unwrap(), intt(&b, &i).unwrap());
            let rhs: Vec<u32> = ia.0.iter().zip(&ib.0).map(|(&x, &y)| md.add(x, y)).collect();
            assert_eq!(lhs.0, rhs);
        }
    }

    #[test]
    fn bit_reverse() {
        let idx = bit_reverse_permute(&Poly((0..8).collect()));
        // element i lands at rev(i); for 3 bits the map is its own inverse
        assert_eq!(idx.0, vec![0, 4, 2, 6, 1, 5, 3, 7]);
        assert_eq!(bit_reverse_permute(&Poly(vec![4, 9])).0, vec![4, 9]);
        let a = Poly((0..64).map(|x| x * 3).collect());
        assert_eq!(bit_reverse_permute(&bit_reverse_permute(&a)), a);
    }

    #[test]
    fn polymul_examples() {
        let m17 = m(17);
        let a = Poly(vec![1, 1]);
        assert_eq!(polymul_schoolbook(&a, &a, &m17).unwrap().0, vec![0, 2]);
        assert_eq!(polymul_negacyclic(&a, &a, &m17).unwrap().0, vec![0, 2]);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let md = m(12289);
        let a = random_poly(&mut rng, 16, 12289);
        let mut one = Poly::zero(16);
        one.0[0] = 1;
        assert_eq!(polymul_negacyclic(&a, &one, &md).unwrap(), a);
        assert_eq!(polymul_schoolbook(&a, &Poly::zero(16), &md).unwrap(), Poly::zero(16));
        assert!(matches!(
            polymul_negacyclic(&Poly::zero(16), &Poly::zero(16), &m(17)),
            Err(NttError::NotNttFriendly { .. })
        ));
    }

    #[test]
    fn convolution_theorem_n512() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let md = m(12289);
        for _ in 0..10 {
            let a = random_poly(&mut rng, 512, 12289);
            let b = random_poly(&mut rng, 512, 12289);
            assert_eq!(
                polymul_negacyclic(&a, &b, &md).unwrap(),
                polymul_schoolbook(&a, &b, &md).unwrap()
            );
        }
    }

    proptest! {
        #[test]
        fn schoolbook_commutes(seed in any::<u64>(), log_n in 0u32..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 1 << log_n;
            let md = m(12289);
            let a = random_poly(&mut rng, n, 12289);
            let b = random_poly(&mut rng, n, 12289);
            prop_assert_eq!(polymul_schoolbook(&a, &b, &md).unwrap(), polymul_schoolbook(&b, &a, &md).unwrap());
        }

        #[test]
        fn delta_transforms_to_ones(log_n in 1u32..10) {
            let n = 1 << log_n;
            let plan = NttPlan::forward(n, m(12289)).unwrap();
            let mut d = Poly::zero(n);
            d.0[0] = 1;
            prop_assert_eq!(plan.transform(&d).unwrap().0, vec![1; n]);
        }
    }
}
