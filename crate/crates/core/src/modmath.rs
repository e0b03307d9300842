//! 32-bit modular arithmetic in Montgomery form, root-of-unity search and
//! the geometric twiddle recurrence used by the compute unit.
//!
//! Residues are `u32` values in `[0, q)`. Montgomery-form residues use the
//! radix `R = 2^32`; a value `x` is represented as `x·R mod q`.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModError {
    #[error("modulus {0} is not an odd prime below 2^31")]
    InvalidModulus(u64),
    #[error("no root of unity of order {order} modulo {q}")]
    NoSuchRoot { q: u32, order: u64 },
    #[error("{0} is not invertible")]
    NotInvertible(u32),
}

/// An odd prime modulus `q < 2^31` with precomputed Montgomery constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Modulus {
    q: u32,
    /// `-q^{-1} mod 2^32`
    q_neg_inv: u32,
    /// `2^32 mod q`
    r: u32,
    /// `2^64 mod q`
    r2: u32,
}

impl Modulus {
    pub fn new(q: u64) -> Result<Self, ModError> {
        if q <= 2 || q >= 1 << 31 || q.is_multiple_of(2) || !is_prime(q as u32) {
            return Err(ModError::InvalidModulus(q));
        }
        let q = q as u32;
        // Newton iteration for q^{-1} mod 2^32; each step doubles the correct bits.
        let mut inv: u32 = 1;
        for _ in 0..5 {
            inv = inv.wrapping_mul(2u32.wrapping_sub(q.wrapping_mul(inv)));
        }
        debug_assert_eq!(q.wrapping_mul(inv), 1);
        let r = ((1u64 << 32) % q as u64) as u32;
        let r2 = ((r as u64 * r as u64) % q as u64) as u32;
        let m = Modulus {
            q,
            q_neg_inv: inv.wrapping_neg(),
            r,
            r2,
        };
        m.self_check();
        Ok(m)
    }

    /// Round-trips a handful of fixed values through the Montgomery domain.
    fn self_check(&self) {
        let q = self.q as u64;
        for x in [0u64, 1, 2, q / 3, q / 2 + 1, q - 1] {
            let x = x as u32;
            assert_eq!(self.from_mont(self.to_mont(x)), x, "montgomery round trip");
            let sq = self.from_mont(self.mont_mul(self.to_mont(x), self.to_mont(x)));
            assert_eq!(sq as u64, (x as u64 * x as u64) % q, "montgomery product");
        }
    }

    #[inline]
    pub fn value(&self) -> u32 {
        self.q
    }

    #[inline]
    pub fn neg_inv(&self) -> u32 {
        self.q_neg_inv
    }

    #[inline]
    pub fn r_mod_q(&self) -> u32 {
        self.r
    }

    #[inline]
    pub fn r2_mod_q(&self) -> u32 {
        self.r2
    }

    #[inline]
    pub fn add(&self, a: u32, b: u32) -> u32 {
        debug_assert!(a < self.q && b < self.q);
        let s = a + b;
        if s >= self.q {
            s - self.q
        } else {
            s
        }
    }

    #[inline]
    pub fn sub(&self, a: u32, b: u32) -> u32 {
        debug_assert!(a < self.q && b < self.q);
        if a >= b {
            a - b
        } else {
            a + self.q - b
        }
    }

    #[inline]
    pub fn neg(&self, a: u32) -> u32 {
        self.sub(0, a)
    }

    /// Montgomery reduction of `t < q·2^32`: returns `t·2^-32 mod q`.
    #[inline]
    pub fn reduce(&self, t: u64) -> u32 {
        let m = (t as u32).wrapping_mul(self.q_neg_inv);
        let u = ((t + m as u64 * self.q as u64) >> 32) as u32;
        if u >= self.q {
            u - self.q
        } else {
            u
        }
    }

    /// `a·b·2^-32 mod q`.
    #[inline]
    pub fn mont_mul(&self, a: u32, b: u32) -> u32 {
        debug_assert!(a < self.q && b < self.q);
        self.reduce(a as u64 * b as u64)
    }

    #[inline]
    pub fn to_mont(&self, a: u32) -> u32 {
        self.mont_mul(a % self.q, self.r2)
    }

    #[inline]
    pub fn from_mont(&self, a: u32) -> u32 {
        self.reduce(a as u64)
    }

    /// Plain-domain product, routed through Montgomery multiplication.
    #[inline]
    pub fn mul(&self, a: u32, b: u32) -> u32 {
        self.mont_mul(self.mont_mul(a, b), self.r2)
    }

    pub fn pow(&self, base: u32, mut exp: u64) -> u32 {
        let mut acc = self.r % self.q;
        let mut b = self.to_mont(base);
        while exp > 0 {
            if exp & 1 == 1 {
                acc = self.mont_mul(acc, b);
            }
            b = self.mont_mul(b, b);
            exp >>= 1;
        }
        self.from_mont(acc)
    }

    pub fn inv(&self, a: u32) -> Result<u32, ModError> {
        if a.is_multiple_of(self.q) {
            return Err(ModError::NotInvertible(a));
        }
        Ok(self.pow(a, self.q as u64 - 2))
    }

    /// Plain-domain Gentleman–Sande butterfly: `((a+b), (a−b)·w)`.
    #[inline]
    pub fn butterfly(&self, a: u32, b: u32, w: u32) -> (u32, u32) {
        (self.add(a, b), self.mul(self.sub(a, b), w))
    }

    /// Same butterfly with every operand in Montgomery form; this is what
    /// the compute unit executes.
    #[inline]
    pub fn butterfly_mont(&self, a: u32, b: u32, w: u32) -> (u32, u32) {
        (self.add(a, b), self.mont_mul(self.sub(a, b), w))
    }
}

/// Deterministic Miller–Rabin; bases {2, 7, 61} are exact below 2^32.
pub fn is_prime(n: u32) -> bool {
    if n < 2 {
        return false;
    }
    for p in [2u32, 3, 5, 7, 11, 13, 61] {
        if n == p {
            return true;
        }
        if n.is_multiple_of(p) {
            return false;
        }
    }
    let n64 = n as u64;
    let mut d = n64 - 1;
    let mut s = 0;
    while d.is_multiple_of(2) {
        d /= 2;
        s += 1;
    }
    let powmod = |mut b: u64, mut e: u64| {
        let mut acc = 1u64;
        b %= n64;
        while e > 0 {
            if e & 1 == 1 {
                acc = acc * b % n64;
            }
            b = b * b % n64;
            e >>= 1;
        }
        acc
    };
    'witness: for a in [2u64, 7, 61] {
        let mut x = powmod(a, d);
        if x == 1 || x == n64 - 1 {
            continue;
        }
        for _ in 1..s {
            x = x * x % n64;
            if x == n64 - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// True iff `q` is prime and `2n | q − 1`, so both the order-`n` root and
/// the order-`2n` twist root exist.
pub fn is_ntt_friendly(q: u64, n: u64) -> bool {
    debug_assert!(n.is_power_of_two());
    q > 2 && q < 1 << 32 && is_prime(q as u32) && (q - 1).is_multiple_of(2 * n)
}

/// Smallest residue `w` with `w^order = 1` and `w^(order/2) ≠ 1`.
///
/// `order` must be a power of two. All primitive roots of that order are
/// the odd powers of any one of them, so the minimum is found by
/// enumerating those instead of scanning every residue.
pub fn find_root_of_unity(m: &Modulus, order: u64) -> Result<u32, ModError> {
    let q = m.value();
    if order == 0 || !order.is_power_of_two() || !(q as u64 - 1).is_multiple_of(order) {
        return Err(ModError::NoSuchRoot { q, order });
    }
    if order == 1 {
        return Ok(1);
    }
    let cofactor = (q as u64 - 1) / order;
    let mut seed = None;
    for g in 2..q {
        let w = m.pow(g, cofactor);
        if m.pow(w, order / 2) != 1 {
            seed = Some(w);
            break;
        }
    }
    let seed = seed.ok_or(ModError::NoSuchRoot { q, order })?;
    let step = m.mul(seed, seed);
    let mut cur = seed;
    let mut best = seed;
    for _ in 0..order / 2 {
        best = best.min(cur);
        cur = m.mul(cur, step);
    }
    Ok(best)
}

/// On-the-fly twiddle generator state: an initial value and the per-stage
/// step applied to the butterfly-to-butterfly ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TwiddleGen {
    pub omega0: u32,
    pub r_omega: u32,
}

impl TwiddleGen {
    pub fn new(omega0: u32, r_omega: u32) -> Self {
        TwiddleGen { omega0, r_omega }
    }

    /// Ratio between consecutive butterflies at `stage` (1-based):
    /// `r_omega^(stage−1)`.
    pub fn stage_ratio(&self, m: &Modulus, stage: u32) -> u32 {
        assert!(stage >= 1);
        let mut ratio = 1;
        for _ in 1..stage {
            ratio = m.mul(ratio, self.r_omega);
        }
        ratio
    }

    /// The `count` twiddles produced within one stage by the recurrence
    /// `ω ← ω·ω_s`, starting from `omega0`.
    pub fn sequence(&self, m: &Modulus, stage: u32, count: usize) -> Vec<u32> {
        assert!(count >= 1);
        let ratio = self.stage_ratio(m, stage);
        let mut w = self.omega0;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            out.push(w);
            w = m.mul(w, ratio);
        }
        out
    }
}

/// Free-function form of [`TwiddleGen::sequence`].
pub fn twiddle_sequence(g: TwiddleGen, m: &Modulus, stage: u32, count: usize) -> Vec<u32> {
    g.sequence(m, stage, count)
}
