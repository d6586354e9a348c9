//! Continuous and binary hash codes.
//!
//! A [`HashCode`] is the tanh-bounded relaxation `h ∈ [-1, 1]^K`; a
//! [`BinaryCode`] is its sign quantization `b ∈ {-1, +1}^K`, packed
//! little-endian into 64-bit words (bit set ↔ +1). Pad bits past `K` in the
//! final word are always zero.
//!
//! For binary codes the Hamming distance and cosine similarity are tied by
//! `hamming(a, b) = K/2 · (1 − cos(a, b))`; [`hamming_from_cosine`] is that map.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Norm below which cosine similarity is refused.
pub const NORM_EPS: f64 = 1e-12;

/// Relaxed real-valued hash code.
#[derive(Debug, Clone, PartialEq)]
pub struct HashCode(Vec<f64>);

impl HashCode {
    /// Wraps `values`, rejecting non-finite elements or elements outside [-1, 1].
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || v.abs() > 1.0)
        {
            return Err(Error::InvalidInput(format!(
                "hash code element {i} = {v} is not a finite value in [-1, 1]"
            )));
        }
        Ok(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn quantize(&self) -> BinaryCode {
        // Already validated finite.
        BinaryCode::from_signs(&self.0)
    }
}

impl AsRef<[f64]> for HashCode {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Bit-packed code in {-1, +1}^K.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryCode {
    words: Vec<u64>,
    len: usize,
}

#[inline]
fn words_for(len: usize) -> usize {
    len.div_ceil(64)
}

#[inline]
fn tail_mask(len: usize) -> u64 {
    match len % 64 {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

impl BinaryCode {
    /// Packs the signs of `values`; `sign(0) = +1`. Non-finite input is not checked.
    pub fn from_signs(values: &[f64]) -> Self {
        let mut words = vec![0u64; words_for(values.len())];
        for (i, &v) in values.iter().enumerate() {
            if v >= 0.0 {
                words[i / 64] |= 1u64 << (i % 64);
            }
        }
        Self {
            words,
            len: values.len(),
        }
    }

    /// Builds a code from raw words, clearing any pad bits.
    pub fn from_words(mut words: Vec<u64>, len: usize) -> Result<Self> {
        if words.len() != words_for(len) {
            return Err(Error::shape("words", words_for(len), words.len()));
        }
        if let Some(last) = words.last_mut() {
            *last &= tail_mask(len);
        }
        Ok(Self { words, len })
    }

    /// Code length `K`.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// Logical element `i` as ±1.
    pub fn get(&self, i: usize) -> i8 {
        assert!(
            i < self.len,
            "bit index {i} out of range for K = {}",
            self.len
        );
        if self.words[i / 64] >> (i % 64) & 1 == 1 {
            1
        } else {
            -1
        }
    }

    pub fn to_signs(&self) -> Vec<i8> {
        (0..self.len).map(|i| self.get(i)).collect()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        (0..self.len).map(|i| f64::from(self.get(i))).collect()
    }

    /// Bitwise complement within the first `K` bits (the code `-b`).
    pub fn negated(&self) -> Self {
        let mut words: Vec<u64> = self.words.iter().map(|w| !w).collect();
        if let Some(last) = words.last_mut() {
            *last &= tail_mask(self.len);
        }
        Self {
            words,
            len: self.len,
        }
    }

    /// Popcount of `self XOR other` with no length check.
    #[inline]
    pub(crate) fn hamming_unchecked(&self, other: &Self) -> u32 {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }
}

/// Sign-quantizes a hash code; `sign(0) = +1`.
pub fn quantize(h: &[f64]) -> Result<BinaryCode> {
    if let Some(i) = h.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "cannot quantize non-finite element {i} ({})",
            h[i]
        )));
    }
    Ok(BinaryCode::from_signs(h))
}

/// Number of positions where `a` and `b` differ.
pub fn hamming(a: &BinaryCode, b: &BinaryCode) -> Result<u32> {
    if a.len != b.len {
        return Err(Error::InvalidInput(format!(
            "hamming on codes of length {} and {}",
            a.len, b.len
        )));
    }
    Ok(a.hamming_unchecked(b))
}

/// Cosine similarity clamped to [-1, 1].
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::InvalidInput(format!(
            "cosine on vectors of length {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu < NORM_EPS || nv < NORM_EPS {
        return Err(Error::Degenerate(format!(
            "cosine with near-zero norm (|u| = {nu:e}, |v| = {nv:e})"
        )));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Hamming distance implied by cosine similarity `s` at code length `k`.
pub fn hamming_from_cosine(s: f64, k: usize) -> f64 {
    k as f64 / 2.0 * (1.0 - s)
}

pub(crate) fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub(crate) fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

const CODE_MAGIC: &[u8; 4] = b"DHDC";
const CODE_VERSION: u16 = 1;

/// Writes codes in the packed `DHDC` format:
/// `magic "DHDC" | version u16 | K u16 | count u64 | count × ceil(K/64) u64`,
/// all little-endian.
pub fn write_codes(path: &Path, k: usize, codes: &[BinaryCode]) -> Result<()> {
    let k16 = u16::try_from(k)
        .map_err(|_| Error::InvalidInput(format!("code length {k} does not fit in u16")))?;
    if let Some(c) = codes.iter().find(|c| c.len() != k) {
        return Err(Error::shape("code length", k, c.len()));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(CODE_MAGIC)?;
    put(&CODE_VERSION.to_le_bytes())?;
    put(&k16.to_le_bytes())?;
    put(&(codes.len() as u64).to_le_bytes())?;
    for code in codes {
        for word in code.words() {
            put(&word.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a `DHDC` file, returning `(K, codes)`.
pub fn read_codes(path: &Path) -> Result<(usize, Vec<BinaryCode>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut take = |buf: &mut [u8]| r.read_exact(buf).map_err(|e| Error::io(path, e));
    let mut magic = [0u8; 4];
    take(&mut magic)?;
    if &magic != CODE_MAGIC {
        return Err(Error::Version {
            path: path.into(),
            reason: format!("bad magic {magic:?}, expected DHDC"),
        });
    }
    let mut b2 = [0u8; 2];
    take(&mut b2)?;
    let version = u16::from_le_bytes(b2);
    if version != CODE_VERSION {
        return Err(Error::Version {
            path: path.into(),
            reason: format!("code file version {version}, expected {CODE_VERSION}"),
        });
    }
    take(&mut b2)?;
    let k = usize::from(u16::from_le_bytes(b2));
    let mut b8 = [0u8; 8];
    take(&mut b8)?;
    let count = u64::from_le_bytes(b8) as usize;
    let per = words_for(k);
    let mut codes = Vec::with_capacity(count.min(1 << 24));
    for _ in 0..count {
        let mut words = Vec::with_capacity(per);
        for _ in 0..per {
            take(&mut b8)?;
            words.push(u64::from_le_bytes(b8));
        }
        codes.push(BinaryCode::from_words(words, k)?);
    }
    Ok((k, codes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn code(signs: &[f64]) -> BinaryCode {
        quantize(signs).unwrap()
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(
            code(&[0.3, -0.7, 0.01, -0.99]).to_signs(),
            vec![1, -1, 1, -1]
        );
        assert_eq!(code(&[0.0, 0.0]).to_signs(), vec![1, 1]);
        assert_eq!(code(&[-0.0]).to_signs(), vec![1]);
        let b = [1.0, -1.0, -1.0, 1.0, 1.0];
        assert_eq!(code(&b).to_f64(), b.to_vec());
    }

    #[test]
    fn quantize_rejects_non_finite() {
        assert!(matches!(
            quantize(&[0.1, f64::NAN]),
            Err(Error::InvalidInput(_))
        ));
        assert!(quantize(&[f64::INFINITY]).is_err());
        assert!(HashCode::new(vec![1.5]).is_err());
    }

    #[test]
    fn hamming_examples() {
        let a = code(&[1.0; 16]);
        assert_eq!(hamming(&a, &a).unwrap(), 0);
        assert_eq!(hamming(&a, &a.negated()).unwrap(), 16);
        let x = code(&[1.0, 1.0, 1.0, 1.0]);
        let y = code(&[1.0, 1.0, -1.0, -1.0]);
        assert_eq!(hamming(&x, &y).unwrap(), 2);
        assert!(hamming(&x, &a).is_err());
    }

    #[test]
    fn negation_keeps_pad_bits_clear() {
        let a = code(&[1.0; 70]);
        let n = a.negated();
        assert_eq!(n.words()[1], 0);
        assert_eq!(hamming(&a, &n).unwrap(), 70);
    }

    #[test]
    fn cosine_examples() {
        let u = [0.3, -0.2, 0.9];
        assert!((cosine(&u, &u).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
        assert_eq!(
            cosine(&[1.0, 1.0, 1.0, 1.0], &[1.0, 1.0, -1.0, -1.0]).unwrap(),
            0.0
        );
        assert!(matches!(
            cosine(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::Degenerate(_))
        ));
        assert!(cosine(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn hamming_from_cosine_examples() {
        assert_eq!(hamming_from_cosine(1.0, 64), 0.0);
        assert_eq!(hamming_from_cosine(-1.0, 64), 64.0);
        assert_eq!(hamming_from_cosine(0.0, 4), 2.0);
    }

    #[test]
    fn packed_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let k = rng.random_range(1..=150);
            let a: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let naive = a
                .iter()
                .zip(&b)
                .filter(|(x, y)| (**x >= 0.0) != (**y >= 0.0))
                .count() as u32;
            assert_eq!(hamming(&code(&a), &code(&b)).unwrap(), naive);
        }
    }

    #[test]
    fn file_round_trip_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.dhdc");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let codes: Vec<BinaryCode> = (0..37)
            .map(|_| {
                code(
                    &(0..70)
                        .map(|_| rng.random_range(-1.0..1.0))
                        .collect::<Vec<_>>(),
                )
            })
            .collect();
        write_codes(&path, 70, &codes).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"DHDC");
        assert_eq!(bytes.len(), 16 + 37 * 2 * 8);
        let (k, back) = read_codes(&path).unwrap();
        assert_eq!(k, 70);
        assert_eq!(back, codes);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, bad).unwrap();
        assert!(matches!(read_codes(&path), Err(Error::Version { .. })));
    }

    fn binary_pair(k: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        let elem = prop_oneof![Just(-1.0f64), Just(1.0f64)];
        (
            proptest::collection::vec(elem.clone(), k),
            proptest::collection::vec(elem, k),
        )
    }

    proptest! {
        #[test]
        fn hamming_equals_cosine_map_on_binary(
            (a, b) in prop_oneof![binary_pair(8), binary_pair(16), binary_pair(32), binary_pair(64)]
        ) {
            let k = a.len();
            let d = hamming(&code(&a), &code(&b)).unwrap() as f64;
            let via_cos = hamming_from_cosine(cosine(&a, &b).unwrap(), k);
            prop_assert!((d - via_cos).abs() < 1e-9);
        }

        #[test]
        fn pack_unpack_identity(signs in proptest::collection::vec(prop_oneof![Just(-1i8), Just(1i8)], 1..200)) {
            let f: Vec<f64> = signs.iter().map(|&s| f64::from(s)).collect();
            let b = code(&f);
            prop_assert_eq!(b.to_signs(), signs);
            prop_assert_eq!(BinaryCode::from_words(b.words().to_vec(), b.len()).unwrap(), b.clone());
            prop_assert_eq!(code(&b.to_f64()), b);
        }

        #[test]
        fn hamming_is_a_metric(
            a in proptest::collection::vec(-1.0f64..1.0, 40),
            b in proptest::collection::vec(-1.0f64..1.0, 40),
            c in proptest::collection::vec(-1.0f64..1.0, 40),
        ) {
            let (a, b, c) = (code(&a), code(&b), code(&c));
            let ab = hamming(&a, &b).unwrap();
            prop_assert_eq!(ab, hamming(&b, &a).unwrap());
            prop_assert_eq!(ab == 0, a == b);
            prop_assert!(hamming(&a, &c).unwrap() <= ab + hamming(&b, &c).unwrap());
        }
    }
}
