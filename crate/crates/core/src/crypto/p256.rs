//! NIST P-256 group arithmetic over `num_bigint::BigUint`.
//!
//! This is a compact, desk-scale implementation: Jacobian coordinates with
//! the a = -3 doubling formula, mixed addition against affine points, and
//! Fermat inversion. It is not constant-time and is sized for simulation
//! workloads, not production cryptography.
//!
//! The curve constants are pinned below and are self-checked by the test
//! suite: the base point must satisfy the curve equation, its order times
//! the base point must be the identity, and both moduli must pass
//! Miller-Rabin. A wrong constant fails those checks with overwhelming
//! probability.

use std::sync::OnceLock;

use num_bigint::BigUint;

pub const FIELD_LEN: usize = 32;
/// Uncompressed point: 0x04 ‖ x ‖ y.
pub const POINT_LEN: usize = 65;

pub struct Curve {
    /// Field prime.
    pub p: BigUint,
    /// Group order.
    pub n: BigUint,
    /// Curve equation constant in y² = x³ − 3x + b.
    pub b: BigUint,
    gx: BigUint,
    gy: BigUint,
}

const P_HEX: &str = "ffffffff00000001000000000000000000000000ffffffffffffffffffffffff";
const N_HEX: &str = "ffffffff00000000ffffffffffffffffbce6faada7179e84f3b9cac2fc632551";
const B_HEX: &str = "5ac635d8aa3a93e7b3ebbd55769886bc651d06b0cc53b0f63bce3c3e27d2604b";
const GX_HEX: &str = "6b17d1f2e12c4247f8bce6e563a440f277037d812deb33a0f4a13945d898c296";
const GY_HEX: &str = "4fe342e2fe1a7f9b8ee7eb4a7c0f9e162bce33576b315ececbb6406837bf51f5";

fn from_hex(s: &str) -> BigUint {
    BigUint::parse_bytes(s.as_bytes(), 16).expect("valid hex constant")
}

pub fn curve() -> &'static Curve {
    static CURVE: OnceLock<Curve> = OnceLock::new();
    CURVE.get_or_init(|| Curve {
        p: from_hex(P_HEX),
        n: from_hex(N_HEX),
        b: from_hex(B_HEX),
        gx: from_hex(GX_HEX),
        gy: from_hex(GY_HEX),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Point {
    Infinity,
    Affine { x: BigUint, y: BigUint },
}

impl Point {
    pub fn is_infinity(&self) -> bool {
        matches!(self, Point::Infinity)
    }

    pub fn x(&self) -> Option<&BigUint> {
        match self {
            Point::Infinity => None,
            Point::Affine { x, .. } => Some(x),
        }
    }
}

pub fn base_point() -> Point {
    let c = curve();
    Point::Affine {
        x: c.gx.clone(),
        y: c.gy.clone(),
    }
}

// -- field helpers ---------------------------------------------------------

fn fadd(a: &BigUint, b: &BigUint, p: &BigUint) -> BigUint {
    let mut s = a + b;
    if s >= *p {
        s -= p;
    }
    s
}

fn fsub(a: &BigUint, b: &BigUint, p: &BigUint) -> BigUint {
    if a >= b {
        a - b
    } else {
        p - b + a
    }
}

fn fmul(a: &BigUint, b: &BigUint, p: &BigUint) -> BigUint {
    (a * b) % p
}

fn fdouble(a: &BigUint, p: &BigUint) -> BigUint {
    fadd(a, a, p)
}

/// Fermat inversion; `a` must be non-zero mod `p`.
fn finv(a: &BigUint, p: &BigUint) -> BigUint {
    let two = BigUint::from(2u8);
    a.modpow(&(p - &two), p)
}

// -- Jacobian representation -----------------------------------------------

/// (X, Y, Z) with x = X/Z², y = Y/Z³; Z = 0 encodes the identity.
#[derive(Clone)]
struct Jacobian {
    x: BigUint,
    y: BigUint,
    z: BigUint,
}

impl Jacobian {
    fn infinity() -> Self {
        Jacobian {
            x: BigUint::from(1u8),
            y: BigUint::from(1u8),
            z: BigUint::ZERO,
        }
    }

    fn from_affine(point: &Point) -> Self {
        match point {
            Point::Infinity => Jacobian::infinity(),
            Point::Affine { x, y } => Jacobian {
                x: x.clone(),
                y: y.clone(),
                z: BigUint::from(1u8),
            },
        }
    }

    fn is_infinity(&self) -> bool {
        self.z == BigUint::ZERO
    }

    fn to_affine(&self) -> Point {
        if self.is_infinity() {
            return Point::Infinity;
        }
        let p = &curve().p;
        let zinv = finv(&self.z, p);
        let zinv2 = fmul(&zinv, &zinv, p);
        let zinv3 = fmul(&zinv2, &zinv, p);
        Point::Affine {
            x: fmul(&self.x, &zinv2, p),
            y: fmul(&self.y, &zinv3, p),
        }
    }
}

/// dbl-2001-b, specialised for a = -3.
fn jac_double(pt: &Jacobian) -> Jacobian {
    if pt.is_infinity() || pt.y == BigUint::ZERO {
        return Jacobian::infinity();
    }
    let p = &curve().p;
    let delta = fmul(&pt.z, &pt.z, p);
    let gamma = fmul(&pt.y, &pt.y, p);
    let beta = fmul(&pt.x, &gamma, p);
    let t0 = fsub(&pt.x, &delta, p);
    let t1 = fadd(&pt.x, &delta, p);
    let t2 = fmul(&t0, &t1, p);
    let alpha = fadd(&fdouble(&t2, p), &t2, p);
    let alpha2 = fmul(&alpha, &alpha, p);
    let beta8 = {
        let b2 = fdouble(&beta, p);
        let b4 = fdouble(&b2, p);
        fdouble(&b4, p)
    };
    let x3 = fsub(&alpha2, &beta8, p);
    let zy = fadd(&pt.y, &pt.z, p);
    let zy2 = fmul(&zy, &zy, p);
    let z3 = fsub(&fsub(&zy2, &gamma, p), &delta, p);
    let beta4 = fdouble(&fdouble(&beta, p), p);
    let gamma2 = fmul(&gamma, &gamma, p);
    let gamma8 = fdouble(&fdouble(&fdouble(&gamma2, p), p), p);
    let y3 = fsub(&fmul(&alpha, &fsub(&beta4, &x3, p), p), &gamma8, p);
    Jacobian {
        x: x3,
        y: y3,
        z: z3,
    }
}

/// madd-2007-bl: Jacobian + affine.
fn jac_add_affine(a: &Jacobian, b: &Point) -> Jacobian {
    let (bx, by) = match b {
        Point::Infinity => return a.clone(),
        Point::Affine { x, y } => (x, y),
    };
    if a.is_infinity() {
        return Jacobian::from_affine(b);
    }
    let p = &curve().p;
    let z1z1 = fmul(&a.z, &a.z, p);
    let u2 = fmul(bx, &z1z1, p);
    let s2 = fmul(&fmul(by, &a.z, p), &z1z1, p);
    let h = fsub(&u2, &a.x, p);
    if h == BigUint::ZERO {
        if s2 == a.y {
            return jac_double(a);
        }
        return Jacobian::infinity();
    }
    let hh = fmul(&h, &h, p);
    let i = fdouble(&fdouble(&hh, p), p);
    let j = fmul(&h, &i, p);
    let r = fdouble(&fsub(&s2, &a.y, p), p);
    let v = fmul(&a.x, &i, p);
    let r2 = fmul(&r, &r, p);
    let x3 = fsub(&fsub(&r2, &j, p), &fdouble(&v, p), p);
    let y3 = fsub(
        &fmul(&r, &fsub(&v, &x3, p), p),
        &fdouble(&fmul(&a.y, &j, p), p),
        p,
    );
    let zh = fadd(&a.z, &h, p);
    let zh2 = fmul(&zh, &zh, p);
    let z3 = fsub(&fsub(&zh2, &z1z1, p), &hh, p);
    Jacobian {
        x: x3,
        y: y3,
        z: z3,
    }
}

/// Scalar multiple of an arbitrary point. The scalar is reduced mod n by
/// the callers; values ≥ n simply wrap as expected from group arithmetic.
pub fn scalar_mul(k: &BigUint, point: &Point) -> Point {
    if *k == BigUint::ZERO || point.is_infinity() {
        return Point::Infinity;
    }
    let mut acc = Jacobian::infinity();
    for i in (0..k.bits()).rev() {
        acc = jac_double(&acc);
        if k.bit(i) {
            acc = jac_add_affine(&acc, point);
        }
    }
    acc.to_affine()
}

/// Affine window table `[G, 2G, …, 15G]` for the fixed-base multiply.
fn g_table() -> &'static [Point; 15] {
    static TABLE: OnceLock<[Point; 15]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let g = base_point();
        let mut entries = Vec::with_capacity(15);
        entries.push(g.clone());
        for i in 1..15 {
            let prev: &Point = &entries[i - 1];
            entries.push(jac_add_affine(&Jacobian::from_affine(prev), &g).to_affine());
        }
        entries.try_into().expect("15 window entries")
    })
}

/// Fixed-base multiply with a 4-bit window.
pub fn base_mul(k: &BigUint) -> Point {
    let k = k % &curve().n;
    if k == BigUint::ZERO {
        return Point::Infinity;
    }
    let table = g_table();
    let bytes = fe_to_bytes(&k);
    let mut acc = Jacobian::infinity();
    for byte in bytes {
        for nibble in [byte >> 4, byte & 0x0F] {
            for _ in 0..4 {
                acc = jac_double(&acc);
            }
            if nibble != 0 {
                acc = jac_add_affine(&acc, &table[nibble as usize - 1]);
            }
        }
    }
    acc.to_affine()
}

/// Simultaneous `a·G + b·Q` (Shamir's trick); the verification hot path.
pub fn base_and_point_mul(a: &BigUint, b: &BigUint, q: &Point) -> Point {
    let n = &curve().n;
    let a = a % n;
    let b = b % n;
    if b == BigUint::ZERO || q.is_infinity() {
        return base_mul(&a);
    }
    if a == BigUint::ZERO {
        return scalar_mul(&b, q);
    }
    let g = base_point();
    let gq = point_add(&g, q);
    let bits = a.bits().max(b.bits());
    let mut acc = Jacobian::infinity();
    for i in (0..bits).rev() {
        acc = jac_double(&acc);
        match (a.bit(i), b.bit(i)) {
            (true, true) => acc = jac_add_affine(&acc, &gq),
            (true, false) => acc = jac_add_affine(&acc, &g),
            (false, true) => acc = jac_add_affine(&acc, q),
            (false, false) => {}
        }
    }
    acc.to_affine()
}

pub fn point_add(a: &Point, b: &Point) -> Point {
    jac_add_affine(&Jacobian::from_affine(a), b).to_affine()
}

// -- encoding ---------------------------------------------------------------

pub fn fe_to_bytes(v: &BigUint) -> [u8; FIELD_LEN] {
    let raw = v.to_bytes_be();
    let mut out = [0u8; FIELD_LEN];
    out[FIELD_LEN - raw.len()..].copy_from_slice(&raw);
    out
}

#[derive(Debug, PartialEq, Eq, Clone, Copy)]
pub enum PointError {
    BadLength,
    BadPrefix,
    NotOnCurve,
}

pub fn encode_point(point: &Point) -> Option<[u8; POINT_LEN]> {
    match point {
        Point::Infinity => None,
        Point::Affine { x, y } => {
            let mut out = [0u8; POINT_LEN];
            out[0] = 0x04;
            out[1..33].copy_from_slice(&fe_to_bytes(x));
            out[33..].copy_from_slice(&fe_to_bytes(y));
            Some(out)
        }
    }
}

pub fn decode_point(bytes: &[u8]) -> Result<Point, PointError> {
    if bytes.len() != POINT_LEN {
        return Err(PointError::BadLength);
    }
    if bytes[0] != 0x04 {
        return Err(PointError::BadPrefix);
    }
    let c = curve();
    let x = BigUint::from_bytes_be(&bytes[1..33]);
    let y = BigUint::from_bytes_be(&bytes[33..]);
    if x >= c.p || y >= c.p || !on_curve(&x, &y) {
        return Err(PointError::NotOnCurve);
    }
    Ok(Point::Affine { x, y })
}

pub fn on_curve(x: &BigUint, y: &BigUint) -> bool {
    let c = curve();
    let p = &c.p;
    let lhs = fmul(y, y, p);
    let x2 = fmul(x, x, p);
    let x3 = fmul(&x2, x, p);
    let three_x = fadd(&fdouble(x, p), x, p);
    let rhs = fadd(&fsub(&x3, &three_x, p), &c.b, p);
    lhs == rhs
}

// -- scalar (mod n) helpers --------------------------------------------------

pub fn scalar_from_bytes(bytes: &[u8]) -> BigUint {
    BigUint::from_bytes_be(bytes) % &curve().n
}

pub fn scalar_add(a: &BigUint, b: &BigUint) -> BigUint {
    (a + b) % &curve().n
}

pub fn scalar_mul_mod_n(a: &BigUint, b: &BigUint) -> BigUint {
    (a * b) % &curve().n
}

pub fn scalar_neg(a: &BigUint) -> BigUint {
    let n = &curve().n;
    if *a == BigUint::ZERO {
        BigUint::ZERO
    } else {
        n - (a % n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SimRng;

    fn random_scalar(rng: &mut SimRng) -> BigUint {
        scalar_from_bytes(&rng.bytes::<32>())
    }

    #[test]
    fn generator_is_on_curve() {
        let c = curve();
        assert!(on_curve(&c.gx, &c.gy));
    }

    #[test]
    fn generator_has_order_n() {
        assert_eq!(base_mul(&curve().n.clone()), Point::Infinity);
        // n-1 lands on the negation of G, not infinity.
        let n_minus_1 = &curve().n - 1u8;
        assert!(!base_mul(&n_minus_1).is_infinity());
    }

    #[test]
    fn scalar_mul_distributes_over_addition() {
        let mut rng = SimRng::from_seed(11);
        for _ in 0..8 {
            let a = random_scalar(&mut rng);
            let b = random_scalar(&mut rng);
            let lhs = base_mul(&scalar_add(&a, &b));
            let rhs = point_add(&base_mul(&a), &base_mul(&b));
            assert_eq!(lhs, rhs);
        }
    }

    #[test]
    fn scalar_mul_is_associative_with_scalar_product() {
        let mut rng = SimRng::from_seed(12);
        for _ in 0..6 {
            let a = random_scalar(&mut rng);
            let b = random_scalar(&mut rng);
            let lhs = scalar_mul(&a, &base_mul(&b));
            let rhs = base_mul(&scalar_mul_mod_n(&a, &b));
            assert_eq!(lhs, rhs);
        }
    }

    #[test]
    fn addition_special_cases() {
        let g = base_point();
        assert_eq!(point_add(&Point::Infinity, &g), g);
        assert_eq!(point_add(&g, &Point::Infinity), g);
        // P + (-P) = infinity.
        let c = curve();
        let neg_g = Point::Affine {
            x: c.gx.clone(),
            y: &c.p - &c.gy,
        };
        assert_eq!(point_add(&g, &neg_g), Point::Infinity);
        // P + P matches 2·P.
        assert_eq!(point_add(&g, &g), base_mul(&BigUint::from(2u8)));
    }

    #[test]
    fn point_codec_roundtrip_and_rejection() {
        let mut rng = SimRng::from_seed(13);
        let point = base_mul(&random_scalar(&mut rng));
        let bytes = encode_point(&point).unwrap();
        assert_eq!(decode_point(&bytes).unwrap(), point);

        let mut off = bytes;
        off[40] ^= 0x01;
        assert_eq!(decode_point(&off), Err(PointError::NotOnCurve));
        assert_eq!(decode_point(&[0u8; 10]), Err(PointError::BadLength));
        let mut bad_prefix = encode_point(&base_point()).unwrap();
        bad_prefix[0] = 0x02;
        assert_eq!(decode_point(&bad_prefix), Err(PointError::BadPrefix));
    }

    /// Miller-Rabin with random bases; a composite modulus would slip
    /// through 24 rounds with probability ≤ 4^-24.
    fn probably_prime(candidate: &BigUint, rng: &mut SimRng) -> bool {
        let one = BigUint::from(1u8);
        let two = BigUint::from(2u8);
        if candidate < &two {
            return false;
        }
        if !candidate.bit(0) {
            return *candidate == two;
        }
        let minus_one = candidate - &one;
        let trailing = minus_one.trailing_zeros().unwrap_or(0);
        let odd = &minus_one >> trailing;
        'witness: for _ in 0..24 {
            let base = BigUint::from_bytes_be(&rng.bytes::<32>()) % (&minus_one - &one) + &two;
            let mut x = base.modpow(&odd, candidate);
            if x == one || x == minus_one {
                continue;
            }
            for _ in 1..trailing {
                x = x.modpow(&two, candidate);
                if x == minus_one {
                    continue 'witness;
                }
            }
            return false;
        }
        true
    }

    #[test]
    fn moduli_are_prime() {
        let mut rng = SimRng::from_seed(14);
        assert!(probably_prime(&curve().p, &mut rng));
        assert!(probably_prime(&curve().n, &mut rng));
        assert!(!probably_prime(&(&curve().p + 1u8), &mut rng));
    }

    #[test]
    fn fe_to_bytes_pads_left() {
        let small = BigUint::from(0xABu8);
        let bytes = fe_to_bytes(&small);
        assert_eq!(bytes[31], 0xAB);
        assert!(bytes[..31].iter().all(|&b| b == 0));
    }
}
