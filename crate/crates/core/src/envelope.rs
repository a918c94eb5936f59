//! Client↔server frame protection: hybrid encryption, signatures,
//! timestamps, participation commitments and the per-round shared-secret
//! schedule used to mask PIR answers.
//!
//! Encryption is X25519 + HKDF-SHA256 + ChaCha20-Poly1305. Any change to a
//! ciphertext makes opening fail outright, which the server treats the same
//! way as a stale timestamp.

use aes::Aes128;
use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use ctr::cipher::{KeyIvInit, StreamCipher};
use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use x25519_dalek::{PublicKey, StaticSecret};

use crate::dpf::{Seed, SEED_BYTES};
use crate::error::{Error, Result};

/// Virtual time in milliseconds.
pub type Tick = u64;

/// Bytes added by [`seal_to`]: ephemeral public key plus AEAD tag.
pub const SEAL_OVERHEAD: usize = 32 + 16;

/// Round timing in virtual ticks.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundClock {
    pub round_ticks: Tick,
    pub publish_ticks: Tick,
    pub skew_ticks: Tick,
}

impl Default for RoundClock {
    fn default() -> Self {
        Self {
            round_ticks: 30_000,
            publish_ticks: 10_000,
            skew_ticks: 2_000,
        }
    }
}

impl RoundClock {
    pub fn round_start(&self, round: u64) -> Tick {
        round * self.round_ticks
    }

    /// Accept window: publish phase plus clock skew.
    pub fn window(&self) -> Tick {
        self.publish_ticks + self.skew_ticks
    }

    pub fn check_freshness(&self, ts: Tick, round: u64) -> bool {
        check_freshness(ts, self.round_start(round), self.window())
    }
}

/// True iff `ts ∈ [round_start, round_start + window]` (closed interval).
pub fn check_freshness(ts: Tick, round_start: Tick, window: Tick) -> bool {
    ts >= round_start && ts - round_start <= window
}

/// A server's long-term decryption key.
#[derive(Clone)]
pub struct ServerKey {
    secret: StaticSecret,
    public: PublicKey,
}

impl ServerKey {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let secret = StaticSecret::random_from_rng(rng);
        let public = PublicKey::from(&secret);
        Self { secret, public }
    }

    pub fn public(&self) -> PublicKey {
        self.public
    }
}

impl std::fmt::Debug for ServerKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServerKey")
            .field("public", &hex::encode(self.public.as_bytes()))
            .finish_non_exhaustive()
    }
}

fn aead_for(shared: &[u8; 32], eph: &PublicKey, recipient: &PublicKey) -> ChaCha20Poly1305 {
    let mut info = Vec::with_capacity(64);
    info.extend_from_slice(eph.as_bytes());
    info.extend_from_slice(recipient.as_bytes());
    let hk = Hkdf::<Sha256>::new(Some(b"2pps-seal-v1"), shared);
    let mut key = [0u8; 32];
    hk.expand(&info, &mut key)
        .expect("32 bytes is a valid HKDF length");
    ChaCha20Poly1305::new(Key::from_slice(&key))
}

/// Anonymous public-key encryption: `ephemeral_pk ‖ AEAD(plaintext)`.
pub fn seal_to<R: RngCore + CryptoRng>(
    recipient: &PublicKey,
    plaintext: &[u8],
    rng: &mut R,
) -> Vec<u8> {
    let eph = StaticSecret::random_from_rng(rng);
    let eph_pub = PublicKey::from(&eph);
    let shared = eph.diffie_hellman(recipient);
    let aead = aead_for(shared.as_bytes(), &eph_pub, recipient);
    // fresh key per message, so a fixed nonce is safe
    let ct = aead
        .encrypt(Nonce::from_slice(&[0u8; 12]), plaintext)
        .expect("encryption of in-memory buffer");
    let mut out = Vec::with_capacity(32 + ct.len());
    out.extend_from_slice(eph_pub.as_bytes());
    out.extend_from_slice(&ct);
    out
}

pub fn open_sealed(key: &ServerKey, ciphertext: &[u8]) -> Result<Vec<u8>> {
    if ciphertext.len() < SEAL_OVERHEAD {
        return Err(Error::Decryption);
    }
    let eph_bytes: [u8; 32] = ciphertext[..32].try_into().unwrap();
    let eph_pub = PublicKey::from(eph_bytes);
    let shared = key.secret.diffie_hellman(&eph_pub);
    let aead = aead_for(shared.as_bytes(), &eph_pub, &key.public);
    aead.decrypt(Nonce::from_slice(&[0u8; 12]), &ciphertext[32..])
        .map_err(|_| Error::Decryption)
}

/// How frame bodies are protected. `Plaintext` exists only as a mutation
/// control for the distinguisher harness.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SealMode {
    #[default]
    Encrypted,
    Plaintext,
}

/// A signed, encrypted client→server frame.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SealedFrame {
    pub round: u64,
    pub recipient: u8,
    pub client_id: u64,
    pub ciphertext: Vec<u8>,
    pub signature: Vec<u8>,
}

fn signed_message(round: u64, recipient: u8, ciphertext: &[u8]) -> Vec<u8> {
    let mut m = Vec::with_capacity(9 + ciphertext.len());
    m.extend_from_slice(&round.to_le_bytes());
    m.push(recipient);
    m.extend_from_slice(ciphertext);
    m
}

/// Everything [`seal`] needs besides the body.
pub struct SealContext<'a> {
    pub recipient: u8,
    pub recipient_pk: &'a PublicKey,
    pub round: u64,
    pub now: Tick,
    pub client_id: u64,
    pub signing_key: &'a SigningKey,
    pub mode: SealMode,
}

/// Encrypts `timestamp ‖ body` for the recipient and signs the result.
pub fn seal<R: RngCore + CryptoRng>(
    body: &[u8],
    ctx: &SealContext<'_>,
    rng: &mut R,
) -> SealedFrame {
    debug_assert!(!body.is_empty());
    let mut plain = Vec::with_capacity(8 + body.len());
    plain.extend_from_slice(&ctx.now.to_le_bytes());
    plain.extend_from_slice(body);
    let ciphertext = match ctx.mode {
        SealMode::Encrypted => seal_to(ctx.recipient_pk, &plain, rng),
        SealMode::Plaintext => plain,
    };
    let signature = ctx
        .signing_key
        .sign(&signed_message(ctx.round, ctx.recipient, &ciphertext))
        .to_bytes()
        .to_vec();
    SealedFrame {
        round: ctx.round,
        recipient: ctx.recipient,
        client_id: ctx.client_id,
        ciphertext,
        signature,
    }
}

/// Decrypts a frame, returning its inner timestamp and body.
pub fn open(frame: &SealedFrame, key: &ServerKey, mode: SealMode) -> Result<(Tick, Vec<u8>)> {
    let plain = match mode {
        SealMode::Encrypted => open_sealed(key, &frame.ciphertext)?,
        SealMode::Plaintext => frame.ciphertext.clone(),
    };
    if plain.len() < 9 {
        return Err(Error::Malformed("frame body too short".into()));
    }
    let ts = u64::from_le_bytes(plain[..8].try_into().unwrap());
    Ok((ts, plain[8..].to_vec()))
}

impl SealedFrame {
    pub fn verify(&self, key: &VerifyingKey) -> bool {
        let Ok(sig) = Signature::from_slice(&self.signature) else {
            return false;
        };
        key.verify(
            &signed_message(self.round, self.recipient, &self.ciphertext),
            &sig,
        )
        .is_ok()
    }

    /// `[u64 round | u8 recipient | u64 client_id | u32 ct_len | ct | u16 sig_len | sig]`
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.push(self.recipient);
        out.extend_from_slice(&self.client_id.to_le_bytes());
        out.extend_from_slice(&(self.ciphertext.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&(self.signature.len() as u16).to_le_bytes());
        out.extend_from_slice(&self.signature);
        out
    }

    pub fn wire_len(&self) -> usize {
        8 + 1 + 8 + 4 + self.ciphertext.len() + 2 + self.signature.len()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let short = || Error::Malformed("sealed frame truncated".into());
        if bytes.len() < 21 {
            return Err(short());
        }
        let round = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let recipient = bytes[8];
        let client_id = u64::from_le_bytes(bytes[9..17].try_into().unwrap());
        let ct_len = u32::from_le_bytes(bytes[17..21].try_into().unwrap()) as usize;
        let ct_end = 21 + ct_len;
        if bytes.len() < ct_end + 2 {
            return Err(short());
        }
        let sig_len = u16::from_le_bytes(bytes[ct_end..ct_end + 2].try_into().unwrap()) as usize;
        if bytes.len() != ct_end + 2 + sig_len {
            return Err(short());
        }
        Ok(Self {
            round,
            recipient,
            client_id,
            ciphertext: bytes[21..ct_end].to_vec(),
            signature: bytes[ct_end + 2..].to_vec(),
        })
    }
}

/// A client's pledge to send one request per round for `k` rounds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParticipationCommitment {
    pub client_id: u64,
    pub start_round: u64,
    pub k: u64,
    pub verify_key: [u8; 32],
}

impl ParticipationCommitment {
    pub fn new(client_id: u64, start_round: u64, k: u64, key: &VerifyingKey) -> Self {
        Self {
            client_id,
            start_round,
            k: k.max(1),
            verify_key: key.to_bytes(),
        }
    }

    pub fn covers(&self, round: u64) -> bool {
        round >= self.start_round && round - self.start_round < self.k
    }

    pub fn verifying_key(&self) -> Result<VerifyingKey> {
        VerifyingKey::from_bytes(&self.verify_key)
            .map_err(|_| Error::Malformed("bad verification key".into()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(56);
        out.extend_from_slice(&self.client_id.to_le_bytes());
        out.extend_from_slice(&self.start_round.to_le_bytes());
        out.extend_from_slice(&self.k.to_le_bytes());
        out.extend_from_slice(&self.verify_key);
        out
    }

    pub fn sign(&self, key: &SigningKey) -> Vec<u8> {
        key.sign(&self.to_bytes()).to_bytes().to_vec()
    }

    /// Checks a self-signature made with the committed key.
    pub fn verify_signature(&self, sig: &[u8]) -> bool {
        let (Ok(vk), Ok(sig)) = (self.verifying_key(), Signature::from_slice(sig)) else {
            return false;
        };
        vk.verify(&self.to_bytes(), &sig).is_ok()
    }
}

/// Per-(client, server) shared secret, advanced once per round.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecretSchedule {
    pub seed: Seed,
    pub round: u64,
}

impl SecretSchedule {
    pub fn new(seed: Seed, round: u64) -> Self {
        Self { seed, round }
    }

    pub fn random<R: RngCore + CryptoRng>(round: u64, rng: &mut R) -> Self {
        let mut seed = [0u8; SEED_BYTES];
        rng.fill_bytes(&mut seed);
        Self { seed, round }
    }
}

/// One-way step: `seed' = SHA-256(seed ‖ round)[..16]`, `round' = round + 1`.
pub fn advance_secret(s: &SecretSchedule) -> SecretSchedule {
    let mut h = Sha256::new();
    h.update(s.seed);
    h.update(s.round.to_le_bytes());
    let digest = h.finalize();
    SecretSchedule {
        seed: digest[..SEED_BYTES].try_into().unwrap(),
        round: s.round + 1,
    }
}

/// AES-128-CTR keystream keyed by the round seed, IV = round number.
pub fn expand_mask(s: &SecretSchedule, length: usize) -> Vec<u8> {
    let mut iv = [0u8; 16];
    iv[8..].copy_from_slice(&s.round.to_be_bytes());
    let mut cipher = ctr::Ctr128BE::<Aes128>::new(&s.seed.into(), &iv.into());
    let mut out = vec![0u8; length];
    cipher.apply_keystream(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use std::collections::HashSet;

    fn setup(rng: &mut ChaCha20Rng) -> (ServerKey, SigningKey) {
        (ServerKey::generate(rng), SigningKey::generate(rng))
    }

    fn frame(rng: &mut ChaCha20Rng, server: &ServerKey, sk: &SigningKey, now: Tick) -> SealedFrame {
        let pk = server.public();
        let ctx = SealContext {
            recipient: 0,
            recipient_pk: &pk,
            round: 3,
            now,
            client_id: 77,
            signing_key: sk,
            mode: SealMode::Encrypted,
        };
        seal(b"share bytes", &ctx, rng)
    }

    #[test]
    fn seal_open_roundtrip() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let (server, sk) = setup(&mut rng);
        let clock = RoundClock::default();
        let now = clock.round_start(3) + 500;
        let f = frame(&mut rng, &server, &sk, now);
        let (ts, body) = open(&f, &server, SealMode::Encrypted).unwrap();
        assert_eq!(body, b"share bytes");
        assert!(clock.check_freshness(ts, 3));
        assert_eq!(SealedFrame::from_bytes(&f.to_bytes()).unwrap(), f);
        assert_eq!(f.to_bytes().len(), f.wire_len());
    }

    #[test]
    fn any_bit_flip_fails_to_open() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let (server, sk) = setup(&mut rng);
        let f = frame(&mut rng, &server, &sk, 90_000);
        for _ in 0..1000 {
            let mut g = f.clone();
            let bit = rng.gen_range(0..g.ciphertext.len() * 8);
            g.ciphertext[bit / 8] ^= 1 << (bit % 8);
            assert!(open(&g, &server, SealMode::Encrypted).is_err());
            assert!(!g.verify(&sk.verifying_key()));
        }
    }

    #[test]
    fn wrong_key_fails() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let (server, sk) = setup(&mut rng);
        let other = ServerKey::generate(&mut rng);
        let f = frame(&mut rng, &server, &sk, 1);
        assert_eq!(
            open(&f, &other, SealMode::Encrypted),
            Err(Error::Decryption)
        );
    }

    #[test]
    fn signature_checks() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let (server, sk) = setup(&mut rng);
        let mut f = frame(&mut rng, &server, &sk, 1);
        let c = ParticipationCommitment::new(77, 0, 10, &sk.verifying_key());
        assert!(f.verify(&c.verifying_key().unwrap()));
        f.signature[5] ^= 0x10;
        assert!(!f.verify(&c.verifying_key().unwrap()));
        let sig = c.sign(&sk);
        assert!(c.verify_signature(&sig));
    }

    #[test]
    fn freshness_window() {
        let clock = RoundClock {
            round_ticks: 30_000,
            publish_ticks: 8_000,
            skew_ticks: 2_000,
        };
        let start = clock.round_start(4);
        assert!(check_freshness(start + 1_000, start, 10_000));
        assert!(check_freshness(start + 10_000, start, 10_000));
        assert!(!check_freshness(start + 10_001, start, 10_000));
        assert!(!check_freshness(start - 1, start, 10_000));
        // a timestamp from round r is stale in round r + 1
        assert!(clock.check_freshness(clock.round_start(4) + 100, 4));
        assert!(!clock.check_freshness(clock.round_start(4) + 100, 5));
    }

    #[test]
    fn commitment_window() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let sk = SigningKey::generate(&mut rng);
        let c = ParticipationCommitment::new(1, 5, 3, &sk.verifying_key());
        assert!(!c.covers(4));
        assert!(c.covers(5) && c.covers(7));
        assert!(!c.covers(8));
    }

    #[test]
    fn lockstep_schedules_agree() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let mut client = SecretSchedule::random(0, &mut rng);
        let mut server = client.clone();
        for _ in 0..100 {
            client = advance_secret(&client);
            server = advance_secret(&server);
            assert_eq!(client, server);
            assert_eq!(expand_mask(&client, 64), expand_mask(&server, 64));
        }
        assert_eq!(client.round, 100);
    }

    #[test]
    fn advancing_flips_about_half_the_bits() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mut total = 0u32;
        for _ in 0..1000 {
            let s = SecretSchedule::random(rng.gen_range(0..1000), &mut rng);
            let t = advance_secret(&s);
            let d: u32 = s
                .seed
                .iter()
                .zip(&t.seed)
                .map(|(a, b)| (a ^ b).count_ones())
                .sum();
            assert!(d > 0);
            total += d;
        }
        let frac = total as f64 / 1000.0 / 128.0;
        assert!((0.4..=0.6).contains(&frac), "mean hamming fraction {frac}");
    }

    #[test]
    fn distinct_seeds_never_collide() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let mut a = SecretSchedule::random(0, &mut rng);
        let mut b = SecretSchedule::random(0, &mut rng);
        let mut seen = HashSet::new();
        for _ in 0..10_000 {
            assert!(seen.insert(a.seed));
            assert!(seen.insert(b.seed));
            a = advance_secret(&a);
            b = advance_secret(&b);
        }
    }

    #[test]
    fn masks() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let s = SecretSchedule::random(12, &mut rng);
        let m = expand_mask(&s, 1000);
        assert_eq!(m, expand_mask(&s, 1000));
        let mut z = m.clone();
        crate::model::xor_into(&mut z, &m);
        assert!(z.iter().all(|&b| b == 0));

        let mut bytes = expand_mask(&s, 50_000);
        bytes.extend(expand_mask(&advance_secret(&s), 50_000));
        let p = stats::chi_square_uniform_p(&stats::byte_histogram(&bytes));
        assert!(p > 0.01, "p = {p}");
    }
}
