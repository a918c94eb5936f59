//! Point-function secret sharing for the write phase.
//!
//! Two backends: a tree-based two-party DPF whose keys are
//! `O(λ·log ℓ_w + W)` bytes, and naive N-party additive sharing where each
//! share is a full `ℓ_w × W` matrix. Both combine by XOR.

use aes::cipher::{generic_array::GenericArray, BlockEncrypt, KeyInit};
use aes::Aes128;
use rand::{CryptoRng, RngCore};
use std::sync::OnceLock;

use crate::error::{check_len, invalid, Error, Result};
use crate::model::ByteMatrix;

/// Seed length in bytes (λ = 128).
pub const SEED_BYTES: usize = 16;

pub type Seed = [u8; SEED_BYTES];

// Fixed public keys for the correlation-robust hash `H_k(x) = AES_k(x) ⊕ x`.
const PRG_KEYS: [[u8; 16]; 4] = [
    *b"2pps-prg-left-00",
    *b"2pps-prg-right-0",
    *b"2pps-prg-ctrl-00",
    *b"2pps-prg-leaf-00",
];

fn ciphers() -> &'static [Aes128; 4] {
    static C: OnceLock<[Aes128; 4]> = OnceLock::new();
    C.get_or_init(|| PRG_KEYS.map(|k| Aes128::new(GenericArray::from_slice(&k))))
}

fn mmo(cipher: &Aes128, x: &Seed) -> Seed {
    let mut block = GenericArray::clone_from_slice(x);
    cipher.encrypt_block(&mut block);
    let mut out = [0u8; 16];
    for i in 0..16 {
        out[i] = block[i] ^ x[i];
    }
    out
}

/// Length-doubling PRG: one seed expands to two child seeds plus two
/// control bits.
fn expand(seed: &Seed) -> (Seed, bool, Seed, bool) {
    let c = ciphers();
    let left = mmo(&c[0], seed);
    let right = mmo(&c[1], seed);
    let ctrl = mmo(&c[2], seed);
    (left, ctrl[0] & 1 == 1, right, ctrl[0] & 2 == 2)
}

/// Stretches a leaf seed to `out.len()` bytes (fixed-key AES in counter mode).
fn convert(seed: &Seed, out: &mut [u8]) {
    let cipher = &ciphers()[3];
    for (ctr, chunk) in out.chunks_mut(16).enumerate() {
        let mut x = *seed;
        for (b, c) in x.iter_mut().zip((ctr as u64).to_le_bytes()) {
            *b ^= c;
        }
        let block = mmo(cipher, &x);
        chunk.copy_from_slice(&block[..chunk.len()]);
    }
}

fn xor_seed(a: &mut Seed, b: &Seed) {
    for (x, y) in a.iter_mut().zip(b) {
        *x ^= *y;
    }
}

/// `log2(domain)` when `domain` is a power of two ≥ 2.
pub fn domain_bits(domain_size: usize) -> Result<u8> {
    if domain_size < 2 || !domain_size.is_power_of_two() {
        return Err(invalid(format!(
            "domain size {domain_size} must be a power of two >= 2"
        )));
    }
    Ok(domain_size.trailing_zeros() as u8)
}

/// `f(i) = value` at `index`, zero elsewhere.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PointFunction {
    pub index: usize,
    pub value: Vec<u8>,
}

impl PointFunction {
    pub fn new(index: usize, value: Vec<u8>) -> Self {
        Self { index, value }
    }

    fn validate(&self, domain_size: usize) -> Result<()> {
        if self.index >= domain_size {
            return Err(invalid(format!(
                "index {} outside domain {domain_size}",
                self.index
            )));
        }
        if self.value.is_empty() {
            return Err(invalid("point function value is empty"));
        }
        Ok(())
    }

    /// Full truth table as a `domain × W` matrix.
    pub fn truth_table(&self, domain_size: usize) -> ByteMatrix {
        let mut m = ByteMatrix::zeros(domain_size, self.value.len());
        m.row_mut(self.index).copy_from_slice(&self.value);
        m
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Party {
    A = 0,
    B = 1,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorrectionWord {
    pub seed: Seed,
    pub t_left: bool,
    pub t_right: bool,
}

/// One party's key of a two-party DPF.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DpfKey {
    pub party: Party,
    pub root_seed: Seed,
    pub correction_words: Vec<CorrectionWord>,
    pub final_correction: Vec<u8>,
}

impl DpfKey {
    pub fn domain_bits(&self) -> u8 {
        self.correction_words.len() as u8
    }

    pub fn value_len(&self) -> usize {
        self.final_correction.len()
    }

    pub fn serialized_len(&self) -> usize {
        2 + SEED_BYTES
            + self.correction_words.len() * (SEED_BYTES + 1)
            + self.final_correction.len()
    }

    /// `[u8 party | u8 domain_bits | 16B root | per level: 16B seed + 1B ctrl | W bytes]`
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.serialized_len());
        out.push(self.party as u8);
        out.push(self.domain_bits());
        out.extend_from_slice(&self.root_seed);
        for cw in &self.correction_words {
            out.extend_from_slice(&cw.seed);
            out.push(cw.t_left as u8 | (cw.t_right as u8) << 1);
        }
        out.extend_from_slice(&self.final_correction);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let malformed = |m: &str| Error::Malformed(format!("dpf key: {m}"));
        if bytes.len() < 2 + SEED_BYTES {
            return Err(malformed("truncated header"));
        }
        let party = match bytes[0] {
            0 => Party::A,
            1 => Party::B,
            _ => return Err(malformed("bad party byte")),
        };
        let levels = bytes[1] as usize;
        let header = 2 + SEED_BYTES + levels * (SEED_BYTES + 1);
        if bytes.len() <= header {
            return Err(malformed("missing final correction"));
        }
        let root_seed: Seed = bytes[2..2 + SEED_BYTES].try_into().unwrap();
        let mut correction_words = Vec::with_capacity(levels);
        for chunk in bytes[2 + SEED_BYTES..header].chunks_exact(SEED_BYTES + 1) {
            let ctrl = chunk[SEED_BYTES];
            if ctrl > 3 {
                return Err(malformed("bad control byte"));
            }
            correction_words.push(CorrectionWord {
                seed: chunk[..SEED_BYTES].try_into().unwrap(),
                t_left: ctrl & 1 == 1,
                t_right: ctrl & 2 == 2,
            });
        }
        Ok(Self {
            party,
            root_seed,
            correction_words,
            final_correction: bytes[header..].to_vec(),
        })
    }
}

/// Splits `f` into two keys whose full-domain evaluations XOR to the truth
/// table of `f`.
pub fn gen_dpf<R: RngCore + CryptoRng>(
    f: &PointFunction,
    domain_size: usize,
    rng: &mut R,
) -> Result<(DpfKey, DpfKey)> {
    let bits = domain_bits(domain_size)?;
    f.validate(domain_size)?;

    let mut root_a = [0u8; SEED_BYTES];
    let mut root_b = [0u8; SEED_BYTES];
    rng.fill_bytes(&mut root_a);
    rng.fill_bytes(&mut root_b);

    let (mut s0, mut s1) = (root_a, root_b);
    let (mut t0, mut t1) = (false, true);
    let mut cws = Vec::with_capacity(bits as usize);

    for level in 0..bits {
        let go_right = (f.index >> (bits - 1 - level)) & 1 == 1;
        let (s0l, t0l, s0r, t0r) = expand(&s0);
        let (s1l, t1l, s1r, t1r) = expand(&s1);

        let mut seed_cw = if go_right { s0l } else { s0r };
        xor_seed(&mut seed_cw, if go_right { &s1l } else { &s1r });
        let t_left = t0l ^ t1l ^ go_right ^ true;
        let t_right = t0r ^ t1r ^ go_right;

        let (mut k0, kt0, mut k1, kt1, t_keep) = if go_right {
            (s0r, t0r, s1r, t1r, t_right)
        } else {
            (s0l, t0l, s1l, t1l, t_left)
        };
        if t0 {
            xor_seed(&mut k0, &seed_cw);
        }
        if t1 {
            xor_seed(&mut k1, &seed_cw);
        }
        let nt0 = kt0 ^ (t0 & t_keep);
        let nt1 = kt1 ^ (t1 & t_keep);
        s0 = k0;
        s1 = k1;
        t0 = nt0;
        t1 = nt1;
        cws.push(CorrectionWord {
            seed: seed_cw,
            t_left,
            t_right,
        });
    }

    let w = f.value.len();
    let mut final_correction = f.value.clone();
    let mut buf = vec![0u8; w];
    convert(&s0, &mut buf);
    crate::model::xor_into(&mut final_correction, &buf);
    convert(&s1, &mut buf);
    crate::model::xor_into(&mut final_correction, &buf);

    let make = |party, root_seed| DpfKey {
        party,
        root_seed,
        correction_words: cws.clone(),
        final_correction: final_correction.clone(),
    };
    Ok((make(Party::A, root_a), make(Party::B, root_b)))
}

/// Evaluates `key` at every point of the domain, one row per point.
pub fn eval_full(key: &DpfKey, domain_size: usize) -> Result<ByteMatrix> {
    let bits = domain_bits(domain_size)?;
    if key.domain_bits() != bits {
        return Err(invalid(format!(
            "key covers 2^{} points, domain has 2^{bits}",
            key.domain_bits()
        )));
    }
    let mut level: Vec<(Seed, bool)> = vec![(key.root_seed, key.party == Party::B)];
    for cw in &key.correction_words {
        let mut next = Vec::with_capacity(level.len() * 2);
        for (seed, t) in &level {
            let (mut sl, mut tl, mut sr, mut tr) = expand(seed);
            if *t {
                xor_seed(&mut sl, &cw.seed);
                xor_seed(&mut sr, &cw.seed);
                tl ^= cw.t_left;
                tr ^= cw.t_right;
            }
            next.push((sl, tl));
            next.push((sr, tr));
        }
        level = next;
    }

    let w = key.value_len();
    let mut out = ByteMatrix::zeros(domain_size, w);
    for (i, (seed, t)) in level.iter().enumerate() {
        let row = out.row_mut(i);
        convert(seed, row);
        if *t {
            crate::model::xor_into(row, &key.final_correction);
        }
    }
    Ok(out)
}

/// Naive N-party sharing: full matrices, the first `N−1` uniform.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdditiveShares {
    pub shares: Vec<ByteMatrix>,
}

pub fn gen_additive<R: RngCore + CryptoRng>(
    f: &PointFunction,
    n_parties: usize,
    domain_size: usize,
    rng: &mut R,
) -> Result<AdditiveShares> {
    if n_parties < 2 {
        return Err(invalid("additive sharing needs at least two parties"));
    }
    if domain_size == 0 {
        return Err(invalid("domain size must be positive"));
    }
    f.validate(domain_size)?;
    let w = f.value.len();
    let mut last = f.truth_table(domain_size);
    let mut shares = Vec::with_capacity(n_parties);
    for _ in 0..n_parties - 1 {
        let mut m = ByteMatrix::zeros(domain_size, w);
        rng.fill_bytes(m.as_bytes_mut());
        last.xor_assign(&m)?;
        shares.push(m);
    }
    shares.push(last);
    Ok(AdditiveShares { shares })
}

/// What a client sends one server for the write phase.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum WriteShare {
    Dpf(DpfKey),
    Additive(ByteMatrix),
}

impl WriteShare {
    /// Expands the share to this server's `ℓ_w × W` contribution.
    pub fn expand(&self, domain_size: usize, width: usize) -> Result<ByteMatrix> {
        let m = match self {
            WriteShare::Dpf(k) => eval_full(k, domain_size)?,
            WriteShare::Additive(m) => m.clone(),
        };
        check_len(domain_size, m.rows())?;
        check_len(width, m.width())?;
        Ok(m)
    }

    /// `[u8 kind | body]`; kind 0 is a DPF key, kind 1 is
    /// `[u32 rows | u32 width | matrix]`.
    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            WriteShare::Dpf(k) => {
                let mut out = vec![0u8];
                out.extend_from_slice(&k.to_bytes());
                out
            }
            WriteShare::Additive(m) => {
                let mut out = Vec::with_capacity(9 + m.as_bytes().len());
                out.push(1);
                out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
                out.extend_from_slice(&(m.width() as u32).to_le_bytes());
                out.extend_from_slice(m.as_bytes());
                out
            }
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        match bytes.first() {
            Some(0) => Ok(WriteShare::Dpf(DpfKey::from_bytes(&bytes[1..])?)),
            Some(1) if bytes.len() >= 9 => {
                let rows = u32::from_le_bytes(bytes[1..5].try_into().unwrap()) as usize;
                let width = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
                Ok(WriteShare::Additive(ByteMatrix::from_vec(
                    rows,
                    width,
                    bytes[9..].to_vec(),
                )?))
            }
            _ => Err(Error::Malformed("unknown write share kind".into())),
        }
    }
}

/// Shares `f` for `n_servers`: a DPF for two servers, additive otherwise.
pub fn share_write<R: RngCore + CryptoRng>(
    f: &PointFunction,
    n_servers: usize,
    domain_size: usize,
    rng: &mut R,
) -> Result<Vec<WriteShare>> {
    if n_servers == 2 {
        let (a, b) = gen_dpf(f, domain_size, rng)?;
        Ok(vec![WriteShare::Dpf(a), WriteShare::Dpf(b)])
    } else {
        Ok(gen_additive(f, n_servers, domain_size, rng)?
            .shares
            .into_iter()
            .map(WriteShare::Additive)
            .collect())
    }
}
