//! Software stand-in for attested enclaves.
//!
//! * A [`Platform`] is one physical host. It owns the key that signs quotes
//!   (standing in for the processor's attestation key) and the root secret
//!   from which measurement-bound sealing keys are derived.
//! * An [`Enclave`] has a code measurement and an Ed25519 identity key. The
//!   same key, mapped to Curve25519, is used for channel key agreement.
//! * The [`AttestationService`] holds every platform's public key, turns
//!   quotes into signed [`AttestationCert`]s and counts its calls.
//! * A host attestation delegate (HAD) enclave on each host lets processes on
//!   two linked hosts attest to each other without calling the service again.
//!
//! Certificate wire layout (all integers big-endian):
//!
//! ```text
//! measurement(32) ∥ enclave_pk(32) ∥ host_id(4) ∥ platform_sig(64) ∥ verdict(1)
//!   ∥ issued_at_us(8) ∥ provenance(1) [∥ had_a(4) ∥ had_b(4) ∥ issuer_len(4) ∥ issuer]
//!   ∥ issuer_sig(64)
//! ```
//!
//! A direct certificate is [`DIRECT_CERT_LEN`] = 206 bytes. `provenance` is 0
//! for certificates signed by the attestation service and 1 for delegated
//! ones, which embed the signing HAD's own direct certificate as `issuer`.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{XChaCha20Poly1305, XNonce};
use ed25519_dalek::{Signature, Signer, SigningKey, VerifyingKey};
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};
use thiserror::Error;
use zeroize::Zeroizing;

use crate::cost::{CostMeter, CostOp};
use crate::time::SimTime;
use crate::wire::{Reader, WireError, Writer};

pub type HostId = u32;

pub const DIRECT_CERT_LEN: usize = 206;
const QUOTE_CONTEXT: &[u8] = b"capsule/quote/v1";
const CERT_CONTEXT: &[u8] = b"capsule/cert/v1";
const SEAL_INFO: &[u8] = b"capsule/seal/v1";
const CHANNEL_SALT: &[u8] = b"capsule/channel/v1";
/// Code identity of the host attestation delegate enclave.
pub const HAD_CODE: &[u8] = b"capsule host attestation delegate v1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnclaveError {
    #[error("enclave code blob is empty")]
    EmptyCode,
    #[error("sealed blob belongs to a different measurement")]
    MeasurementMismatch,
    #[error("authenticated decryption failed")]
    AuthFailure,
    #[error("channel handshake failed")]
    HandshakeFailure,
    #[error("no delegation link between host {0} and host {1}")]
    NoDelegationLink(HostId, HostId),
    #[error("enclave lives on host {enclave} but platform is host {platform}")]
    WrongHost { enclave: HostId, platform: HostId },
    #[error(transparent)]
    Wire(#[from] WireError),
}

/// SHA-256 digest of an enclave's initial code.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Measurement(pub [u8; 32]);

impl Measurement {
    pub fn of(code: &[u8]) -> Self {
        Measurement(Sha256::digest(code).into())
    }
}

impl fmt::Debug for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Measurement(")?;
        for b in &self.0[..6] {
            write!(f, "{b:02x}")?;
        }
        write!(f, "..)")
    }
}

/// An enclave's Ed25519 public key.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PublicKey(pub [u8; 32]);

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey(")?;
        for b in &self.0[..6] {
            write!(f, "{b:02x}")?;
        }
        write!(f, "..)")
    }
}

fn random_signing_key<R: RngCore + CryptoRng>(rng: &mut R) -> SigningKey {
    let mut seed = Zeroizing::new([0u8; 32]);
    rng.fill_bytes(seed.as_mut());
    SigningKey::from_bytes(&seed)
}

/// A signing/agreement key pair. Never serialized in the clear.
pub struct Identity {
    signing: SigningKey,
}

impl Identity {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Self {
            signing: random_signing_key(rng),
        }
    }

    pub fn public_key(&self) -> PublicKey {
        PublicKey(self.signing.verifying_key().to_bytes())
    }

    pub fn sign(&self, msg: &[u8]) -> [u8; 64] {
        self.signing.sign(msg).to_bytes()
    }

    fn secret_bytes(&self) -> Zeroizing<[u8; 32]> {
        Zeroizing::new(self.signing.to_bytes())
    }

    fn from_secret_bytes(bytes: &[u8; 32]) -> Self {
        Self {
            signing: SigningKey::from_bytes(bytes),
        }
    }
}

impl fmt::Debug for Identity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Identity")
            .field("public", &self.public_key())
            .finish_non_exhaustive()
    }
}

fn verify_sig(pk: &PublicKey, msg: &[u8], sig: &[u8; 64]) -> bool {
    match VerifyingKey::from_bytes(&pk.0) {
        Ok(vk) => vk.verify_strict(msg, &Signature::from_bytes(sig)).is_ok(),
        Err(_) => false,
    }
}

/// One physical host.
pub struct Platform {
    host_id: HostId,
    quoting: Identity,
    seal_root: Zeroizing<[u8; 32]>,
}

impl Platform {
    pub fn new<R: RngCore + CryptoRng>(host_id: HostId, rng: &mut R) -> Self {
        let quoting = Identity::generate(rng);
        let mut seal_root = Zeroizing::new([0u8; 32]);
        rng.fill_bytes(seal_root.as_mut());
        Self {
            host_id,
            quoting,
            seal_root,
        }
    }

    pub fn host_id(&self) -> HostId {
        self.host_id
    }

    pub fn public_key(&self) -> PublicKey {
        self.quoting.public_key()
    }

    fn seal_key(&self, measurement: &Measurement) -> Zeroizing<[u8; 32]> {
        let hk = Hkdf::<Sha256>::new(Some(&measurement.0), self.seal_root.as_ref());
        let mut key = Zeroizing::new([0u8; 32]);
        hk.expand(SEAL_INFO, key.as_mut())
            .expect("32 bytes is a valid HKDF length");
        key
    }
}

impl fmt::Debug for Platform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Platform")
            .field("host_id", &self.host_id)
            .finish_non_exhaustive()
    }
}

/// A live enclave instance.
pub struct Enclave {
    measurement: Measurement,
    host_id: HostId,
    identity: Identity,
    seal_key: Zeroizing<[u8; 32]>,
}

impl fmt::Debug for Enclave {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Enclave")
            .field("measurement", &self.measurement)
            .field("host_id", &self.host_id)
            .field("public_key", &self.identity.public_key())
            .finish_non_exhaustive()
    }
}

/// Launches an enclave running `code` on `platform` with a fresh key pair.
pub fn instantiate<R: RngCore + CryptoRng>(
    platform: &Platform,
    code: &[u8],
    rng: &mut R,
) -> Result<Enclave, EnclaveError> {
    if code.is_empty() {
        return Err(EnclaveError::EmptyCode);
    }
    let measurement = Measurement::of(code);
    Ok(Enclave {
        measurement,
        host_id: platform.host_id,
        identity: Identity::generate(rng),
        seal_key: platform.seal_key(&measurement),
    })
}

impl Enclave {
    pub fn measurement(&self) -> Measurement {
        self.measurement
    }

    pub fn host_id(&self) -> HostId {
        self.host_id
    }

    pub fn public_key(&self) -> PublicKey {
        self.identity.public_key()
    }

    pub fn identity(&self) -> &Identity {
        &self.identity
    }

    pub fn sign(&self, msg: &[u8]) -> [u8; 64] {
        self.identity.sign(msg)
    }

    /// Seals this enclave's identity key so a later instance of the same code
    /// on the same host can resume with it.
    pub fn seal_identity<R: RngCore + CryptoRng>(&self, rng: &mut R) -> SealedBlob {
        seal(self, self.identity.secret_bytes().as_ref(), rng)
    }

    /// Re-launches `code` on `platform`, adopting a previously sealed identity.
    pub fn restore<R: RngCore + CryptoRng>(
        platform: &Platform,
        code: &[u8],
        sealed_identity: &SealedBlob,
        rng: &mut R,
    ) -> Result<Enclave, EnclaveError> {
        let mut enclave = instantiate(platform, code, rng)?;
        let secret = Zeroizing::new(unseal(&enclave, sealed_identity)?);
        let bytes: [u8; 32] = secret
            .as_slice()
            .try_into()
            .map_err(|_| EnclaveError::AuthFailure)?;
        enclave.identity = Identity::from_secret_bytes(&bytes);
        Ok(enclave)
    }
}

/// Platform-signed statement binding a measurement to an enclave key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Quote {
    pub measurement: Measurement,
    pub enclave_pk: PublicKey,
    pub host_id: HostId,
    pub platform_sig: [u8; 64],
}

impl Quote {
    fn signed_bytes(measurement: &Measurement, pk: &PublicKey, host_id: HostId) -> Vec<u8> {
        let mut w = Writer::with_capacity(96);
        w.raw(QUOTE_CONTEXT)
            .raw(&measurement.0)
            .raw(&pk.0)
            .u32(host_id);
        w.finish()
    }

    pub fn verify(&self, platform_pk: &PublicKey) -> bool {
        let msg = Self::signed_bytes(&self.measurement, &self.enclave_pk, self.host_id);
        verify_sig(platform_pk, &msg, &self.platform_sig)
    }
}

/// Has the hosting platform sign the enclave's measurement and public key.
pub fn produce_quote(enclave: &Enclave, platform: &Platform) -> Result<Quote, EnclaveError> {
    if enclave.host_id != platform.host_id {
        return Err(EnclaveError::WrongHost {
            enclave: enclave.host_id,
            platform: platform.host_id,
        });
    }
    let msg = Quote::signed_bytes(
        &enclave.measurement,
        &enclave.public_key(),
        platform.host_id,
    );
    Ok(Quote {
        measurement: enclave.measurement,
        enclave_pk: enclave.public_key(),
        host_id: platform.host_id,
        platform_sig: platform.quoting.sign(&msg),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Valid,
    Invalid,
}

/// Who vouched for a certificate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    /// Signed by the attestation service.
    Direct,
    /// Signed by the HAD enclave of `had_pair.0`, whose own direct
    /// certificate is `issuer`, and relayed across the link to `had_pair.1`.
    Delegated {
        had_pair: (HostId, HostId),
        issuer: Box<AttestationCert>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestationCert {
    pub quote: Quote,
    pub verdict: Verdict,
    pub issued_at: SimTime,
    pub provenance: Provenance,
    /// Signature of the issuer (attestation service or delegating HAD) over
    /// every preceding field.
    pub ias_sig: [u8; 64],
}

impl AttestationCert {
    fn encode_body(&self, w: &mut Writer) {
        w.raw(&self.quote.measurement.0)
            .raw(&self.quote.enclave_pk.0)
            .u32(self.quote.host_id)
            .raw(&self.quote.platform_sig)
            .u8(match self.verdict {
                Verdict::Valid => 1,
                Verdict::Invalid => 0,
            })
            .u64(self.issued_at.as_micros());
        match &self.provenance {
            Provenance::Direct => {
                w.u8(0);
            }
            Provenance::Delegated { had_pair, issuer } => {
                w.u8(1)
                    .u32(had_pair.0)
                    .u32(had_pair.1)
                    .bytes(&issuer.encode());
            }
        }
    }

    /// The bytes the issuer signs.
    pub fn signed_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(256);
        w.raw(CERT_CONTEXT);
        self.encode_body(&mut w);
        w.finish()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(DIRECT_CERT_LEN);
        self.encode_body(&mut w);
        w.raw(&self.ias_sig);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, EnclaveError> {
        let mut r = Reader::new(bytes);
        let cert = Self::decode_from(&mut r, 0)?;
        r.finish()?;
        Ok(cert)
    }

    fn decode_from(r: &mut Reader<'_>, depth: u8) -> Result<Self, EnclaveError> {
        let measurement = Measurement(r.array()?);
        let enclave_pk = PublicKey(r.array()?);
        let host_id = r.u32()?;
        let platform_sig = r.array()?;
        let verdict = match r.u8()? {
            1 => Verdict::Valid,
            0 => Verdict::Invalid,
            tag => {
                return Err(WireError::UnknownTag {
                    what: "verdict",
                    tag,
                }
                .into())
            }
        };
        let issued_at = SimTime(r.u64()?);
        let provenance = match r.u8()? {
            0 => Provenance::Direct,
            1 if depth == 0 => {
                let had_pair = (r.u32()?, r.u32()?);
                let mut inner = Reader::new(r.bytes()?);
                let issuer = Self::decode_from(&mut inner, depth + 1)?;
                inner.finish()?;
                Provenance::Delegated {
                    had_pair,
                    issuer: Box::new(issuer),
                }
            }
            tag => {
                return Err(WireError::UnknownTag {
                    what: "provenance",
                    tag,
                }
                .into())
            }
        };
        let ias_sig = r.array()?;
        Ok(Self {
            quote: Quote {
                measurement,
                enclave_pk,
                host_id,
                platform_sig,
            },
            verdict,
            issued_at,
            provenance,
            ias_sig,
        })
    }

    pub fn is_delegated(&self) -> bool {
        matches!(self.provenance, Provenance::Delegated { .. })
    }

    /// Signature verifications [`check_cert`] performs on this certificate.
    pub fn verify_ops(&self) -> u64 {
        match self.provenance {
            Provenance::Direct => 1,
            Provenance::Delegated { .. } => 2,
        }
    }
}

/// Public keys and measurements a verifier trusts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrustAnchors {
    pub ias_key: PublicKey,
    pub had_measurement: Measurement,
}

/// True iff the certificate's issuer signature checks out, its verdict is
/// valid and it attests `expected`.
pub fn check_cert(cert: &AttestationCert, expected: &Measurement, anchors: &TrustAnchors) -> bool {
    if cert.verdict != Verdict::Valid || cert.quote.measurement != *expected {
        return false;
    }
    let msg = cert.signed_bytes();
    match &cert.provenance {
        Provenance::Direct => verify_sig(&anchors.ias_key, &msg, &cert.ias_sig),
        Provenance::Delegated { had_pair, issuer } => {
            matches!(issuer.provenance, Provenance::Direct)
                && issuer.quote.host_id == had_pair.0
                && cert.quote.host_id == had_pair.0
                && check_cert(issuer, &anchors.had_measurement, anchors)
                && verify_sig(&issuer.quote.enclave_pk, &msg, &cert.ias_sig)
        }
    }
}

/// Mock remote attestation service. Shared; safe to call concurrently.
pub struct AttestationService {
    identity: Identity,
    platforms: RwLock<BTreeMap<HostId, PublicKey>>,
    calls: AtomicU64,
}

impl fmt::Debug for AttestationService {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AttestationService")
            .field("public_key", &self.identity.public_key())
            .field("calls", &self.call_count())
            .finish_non_exhaustive()
    }
}

impl AttestationService {
    pub fn new<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Self {
            identity: Identity::generate(rng),
            platforms: RwLock::new(BTreeMap::new()),
            calls: AtomicU64::new(0),
        }
    }

    pub fn public_key(&self) -> PublicKey {
        self.identity.public_key()
    }

    pub fn anchors(&self) -> TrustAnchors {
        TrustAnchors {
            ias_key: self.public_key(),
            had_measurement: Measurement::of(HAD_CODE),
        }
    }

    pub fn register_platform(&self, platform: &Platform) {
        self.platforms
            .write()
            .unwrap()
            .insert(platform.host_id, platform.public_key());
    }

    /// Verifies a quote and signs the verdict. Invalid quotes still get a
    /// (negative) certificate.
    pub fn ias_verify(&self, quote: &Quote, now: SimTime) -> AttestationCert {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let platform_ok = self
            .platforms
            .read()
            .unwrap()
            .get(&quote.host_id)
            .is_some_and(|pk| quote.verify(pk));
        let mut cert = AttestationCert {
            quote: quote.clone(),
            verdict: if platform_ok {
                Verdict::Valid
            } else {
                Verdict::Invalid
            },
            issued_at: now,
            provenance: Provenance::Direct,
            ias_sig: [0; 64],
        };
        cert.ias_sig = self.identity.sign(&cert.signed_bytes());
        cert
    }

    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

/// Encrypted enclave state, bound to the sealing enclave's measurement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedBlob {
    pub measurement_tag: Measurement,
    pub nonce: [u8; 24],
    pub ciphertext: Vec<u8>,
}

pub fn seal<R: RngCore + CryptoRng>(enclave: &Enclave, payload: &[u8], rng: &mut R) -> SealedBlob {
    let mut nonce = [0u8; 24];
    rng.fill_bytes(&mut nonce);
    let cipher = XChaCha20Poly1305::new(enclave.seal_key.as_ref().into());
    let ciphertext = cipher
        .encrypt(
            XNonce::from_slice(&nonce),
            Payload {
                msg: payload,
                aad: &enclave.measurement.0,
            },
        )
        .expect("encryption with a valid key cannot fail");
    SealedBlob {
        measurement_tag: enclave.measurement,
        nonce,
        ciphertext,
    }
}

pub fn unseal(enclave: &Enclave, blob: &SealedBlob) -> Result<Vec<u8>, EnclaveError> {
    if blob.measurement_tag != enclave.measurement {
        return Err(EnclaveError::MeasurementMismatch);
    }
    let cipher = XChaCha20Poly1305::new(enclave.seal_key.as_ref().into());
    cipher
        .decrypt(
            XNonce::from_slice(&blob.nonce),
            Payload {
                msg: &blob.ciphertext,
                aad: &blob.measurement_tag.0,
            },
        )
        .map_err(|_| EnclaveError::AuthFailure)
}

/// Authenticated-encryption channel keyed by static-static X25519 between
/// two identities. Both ends derive the same key independently.
pub struct SecureChannel {
    local_pk: PublicKey,
    peer_pk: PublicKey,
    session_key: Zeroizing<[u8; 32]>,
}

impl fmt::Debug for SecureChannel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SecureChannel")
            .field("local_pk", &self.local_pk)
            .field("peer_pk", &self.peer_pk)
            .finish_non_exhaustive()
    }
}

/// Size added to each plaintext by [`SecureChannel::seal`].
pub const CHANNEL_OVERHEAD: usize = 24 + 16;

impl SecureChannel {
    pub fn establish(local: &Identity, peer_pk: &PublicKey) -> Result<Self, EnclaveError> {
        let peer_vk =
            VerifyingKey::from_bytes(&peer_pk.0).map_err(|_| EnclaveError::HandshakeFailure)?;
        let peer_x = x25519_dalek::PublicKey::from(peer_vk.to_montgomery().to_bytes());
        let local_x = x25519_dalek::StaticSecret::from(local.signing.to_scalar_bytes());
        let shared = local_x.diffie_hellman(&peer_x);
        if !shared.was_contributory() {
            return Err(EnclaveError::HandshakeFailure);
        }
        let local_pk = local.public_key();
        let (lo, hi) = if local_pk <= *peer_pk {
            (local_pk, *peer_pk)
        } else {
            (*peer_pk, local_pk)
        };
        let mut info = [0u8; 64];
        info[..32].copy_from_slice(&lo.0);
        info[32..].copy_from_slice(&hi.0);
        let hk = Hkdf::<Sha256>::new(Some(CHANNEL_SALT), shared.as_bytes());
        let mut session_key = Zeroizing::new([0u8; 32]);
        hk.expand(&info, session_key.as_mut())
            .expect("32 bytes is a valid HKDF length");
        Ok(Self {
            local_pk,
            peer_pk: *peer_pk,
            session_key,
        })
    }

    pub fn peer_pk(&self) -> PublicKey {
        self.peer_pk
    }

    pub fn local_pk(&self) -> PublicKey {
        self.local_pk
    }

    /// `nonce(24) ∥ ciphertext ∥ tag(16)`.
    pub fn seal<R: RngCore + CryptoRng>(
        &self,
        plaintext: &[u8],
        aad: &[u8],
        rng: &mut R,
    ) -> Vec<u8> {
        let mut nonce = [0u8; 24];
        rng.fill_bytes(&mut nonce);
        let cipher = XChaCha20Poly1305::new(self.session_key.as_ref().into());
        let ct = cipher
            .encrypt(
                XNonce::from_slice(&nonce),
                Payload {
                    msg: plaintext,
                    aad,
                },
            )
            .expect("encryption with a valid key cannot fail");
        let mut out = Vec::with_capacity(24 + ct.len());
        out.extend_from_slice(&nonce);
        out.extend_from_slice(&ct);
        out
    }

    pub fn open(&self, message: &[u8], aad: &[u8]) -> Result<Vec<u8>, EnclaveError> {
        if message.len() < CHANNEL_OVERHEAD {
            return Err(EnclaveError::AuthFailure);
        }
        let (nonce, ct) = message.split_at(24);
        let cipher = XChaCha20Poly1305::new(self.session_key.as_ref().into());
        cipher
            .decrypt(XNonce::from_slice(nonce), Payload { msg: ct, aad })
            .map_err(|_| EnclaveError::AuthFailure)
    }

    #[cfg(test)]
    fn key_bytes(&self) -> [u8; 32] {
        *self.session_key
    }
}

/// Opens a channel from `local` to the enclave attested by `peer_cert`.
/// The caller is expected to have run [`check_cert`] on the certificate.
pub fn open_channel(
    local: &Enclave,
    peer_cert: &AttestationCert,
) -> Result<SecureChannel, EnclaveError> {
    if peer_cert.verdict != Verdict::Valid {
        return Err(EnclaveError::HandshakeFailure);
    }
    SecureChannel::establish(&local.identity, &peer_cert.quote.enclave_pk)
}

/// A physical host with its platform key and HAD enclave.
pub struct Host {
    pub platform: Platform,
    pub had: Enclave,
}

impl fmt::Debug for Host {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Host")
            .field("host_id", &self.platform.host_id)
            .finish_non_exhaustive()
    }
}

impl Host {
    /// Creates a host registered with `ias`, with its HAD already running.
    pub fn new<R: RngCore + CryptoRng>(
        host_id: HostId,
        ias: &AttestationService,
        rng: &mut R,
    ) -> Self {
        let platform = Platform::new(host_id, rng);
        ias.register_platform(&platform);
        let had = instantiate(&platform, HAD_CODE, rng).expect("HAD code is non-empty");
        Self { platform, had }
    }

    pub fn host_id(&self) -> HostId {
        self.platform.host_id
    }
}

/// Mutually attested HAD pair between two hosts.
#[derive(Debug)]
pub struct DelegationLink {
    hosts: (HostId, HostId),
    /// Direct certificates of the HADs on `hosts.0` and `hosts.1`.
    had_certs: (AttestationCert, AttestationCert),
    channel: SecureChannel,
}

impl DelegationLink {
    pub fn hosts(&self) -> (HostId, HostId) {
        self.hosts
    }

    fn cert_for(&self, host: HostId) -> &AttestationCert {
        if host == self.hosts.0 {
            &self.had_certs.0
        } else {
            &self.had_certs.1
        }
    }
}

/// Links the HADs of two hosts: one attestation-service call per direction.
pub fn had_pair(
    a: &Host,
    b: &Host,
    ias: &AttestationService,
    now: SimTime,
    meter: &mut CostMeter,
) -> Result<DelegationLink, EnclaveError> {
    let anchors = ias.anchors();
    let cert_a = ias.ias_verify(&produce_quote(&a.had, &a.platform)?, now);
    meter.charge(CostOp::IasCall);
    let cert_b = ias.ias_verify(&produce_quote(&b.had, &b.platform)?, now);
    meter.charge(CostOp::IasCall);
    for cert in [&cert_a, &cert_b] {
        meter.charge(CostOp::Verify);
        if !check_cert(cert, &anchors.had_measurement, &anchors) {
            return Err(EnclaveError::HandshakeFailure);
        }
    }
    let channel = open_channel(&a.had, &cert_b)?;
    meter.charge(CostOp::Sign);
    Ok(DelegationLink {
        hosts: (a.host_id(), b.host_id()),
        had_certs: (cert_a, cert_b),
        channel,
    })
}

/// HAD on `host` locally attests `process` and issues a delegated
/// certificate for it, addressed to the linked host.
fn delegate_one<R: RngCore + CryptoRng>(
    host: &Host,
    process: &Enclave,
    link: &DelegationLink,
    now: SimTime,
    meter: &mut CostMeter,
    rng: &mut R,
) -> Result<AttestationCert, EnclaveError> {
    let quote = produce_quote(process, &host.platform)?;
    // Local attestation: the HAD shares the platform with the process.
    meter.charge(CostOp::LocalAttest);
    let valid = quote.verify(&host.platform.public_key());
    let other = if link.hosts.0 == host.host_id() {
        link.hosts.1
    } else {
        link.hosts.0
    };
    let issuer = link.cert_for(host.host_id()).clone();
    let mut cert = AttestationCert {
        quote,
        verdict: if valid {
            Verdict::Valid
        } else {
            Verdict::Invalid
        },
        issued_at: now,
        provenance: Provenance::Delegated {
            had_pair: (host.host_id(), other),
            issuer: Box::new(issuer),
        },
        ias_sig: [0; 64],
    };
    cert.ias_sig = host.had.sign(&cert.signed_bytes());
    // Relay across the HAD channel, then local attestation to the receiver.
    let relayed = link.channel.seal(&cert.encode(), b"had-relay", rng);
    meter.charge_n(CostOp::Symmetric, 2);
    let cert = AttestationCert::decode(&link.channel.open(&relayed, b"had-relay")?)?;
    meter.charge(CostOp::LocalAttest);
    Ok(cert)
}

/// Mutual attestation of `proc_a` (on host `a`) and `proc_b` (on host `b`)
/// through their linked HADs, with no attestation-service calls. Returns
/// `(cert of proc_a, cert of proc_b)`.
#[allow(clippy::too_many_arguments)]
pub fn delegated_attest<R: RngCore + CryptoRng>(
    a: &Host,
    proc_a: &Enclave,
    b: &Host,
    proc_b: &Enclave,
    link: &DelegationLink,
    now: SimTime,
    meter: &mut CostMeter,
    rng: &mut R,
) -> Result<(AttestationCert, AttestationCert), EnclaveError> {
    let linked = |x: HostId, y: HostId| link.hosts == (x, y) || link.hosts == (y, x);
    if !linked(a.host_id(), b.host_id()) {
        return Err(EnclaveError::NoDelegationLink(a.host_id(), b.host_id()));
    }
    for (host, process) in [(a, proc_a), (b, proc_b)] {
        if process.host_id != host.host_id() {
            return Err(EnclaveError::NoDelegationLink(
                process.host_id,
                host.host_id(),
            ));
        }
    }
    let cert_a = delegate_one(a, proc_a, link, now, meter, rng)?;
    let cert_b = delegate_one(b, proc_b, link, now, meter, rng)?;
    Ok((cert_a, cert_b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    struct World {
        rng: ChaCha20Rng,
        ias: AttestationService,
        platform: Platform,
    }

    fn world(seed: u64) -> World {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let ias = AttestationService::new(&mut rng);
        let platform = Platform::new(1, &mut rng);
        ias.register_platform(&platform);
        World { rng, ias, platform }
    }

    #[test]
    fn instantiate_measures_code() {
        let mut w = world(1);
        let a = instantiate(&w.platform, b"fn-a", &mut w.rng).unwrap();
        let b = instantiate(&w.platform, b"fn-a", &mut w.rng).unwrap();
        let c = instantiate(&w.platform, b"fn-c", &mut w.rng).unwrap();
        assert_eq!(a.measurement(), b.measurement());
        assert_ne!(a.public_key(), b.public_key());
        assert_ne!(a.measurement(), c.measurement());
        assert_eq!(
            instantiate(&w.platform, b"", &mut w.rng).unwrap_err(),
            EnclaveError::EmptyCode
        );
    }

    #[test]
    fn quote_binds_measurement_and_key() {
        let mut w = world(2);
        let e = instantiate(&w.platform, b"fn", &mut w.rng).unwrap();
        let q = produce_quote(&e, &w.platform).unwrap();
        let pk = w.platform.public_key();
        assert!(q.verify(&pk));
        let mut bad = q.clone();
        bad.measurement.0[0] ^= 1;
        assert!(!bad.verify(&pk));
        let mut bad = q.clone();
        bad.enclave_pk.0[3] ^= 1;
        assert!(!bad.verify(&pk));
    }

    #[test]
    fn ias_verdicts_and_call_count() {
        let mut w = world(3);
        let e = instantiate(&w.platform, b"fn", &mut w.rng).unwrap();
        let q = produce_quote(&e, &w.platform).unwrap();
        let cert = w.ias.ias_verify(&q, SimTime(7));
        assert_eq!(cert.verdict, Verdict::Valid);
        let mut forged = q.clone();
        forged.platform_sig[10] ^= 0x40;
        let bad = w.ias.ias_verify(&forged, SimTime(8));
        assert_eq!(bad.verdict, Verdict::Invalid);
        assert_eq!(w.ias.call_count(), 2);

        let anchors = w.ias.anchors();
        assert!(check_cert(&cert, &e.measurement(), &anchors));
        assert!(!check_cert(&bad, &e.measurement(), &anchors));
        assert!(!check_cert(&cert, &Measurement::of(b"other"), &anchors));
        let mut stripped = cert.clone();
        stripped.ias_sig = [0; 64];
        assert!(!check_cert(&stripped, &e.measurement(), &anchors));
    }

    #[test]
    fn cert_codec_layout() {
        let mut w = world(4);
        let e = instantiate(&w.platform, b"fn", &mut w.rng).unwrap();
        let cert = w
            .ias
            .ias_verify(&produce_quote(&e, &w.platform).unwrap(), SimTime(99));
        let bytes = cert.encode();
        assert_eq!(bytes.len(), DIRECT_CERT_LEN);
        assert_eq!(&bytes[..32], &e.measurement().0);
        assert_eq!(&bytes[32..64], &e.public_key().0);
        assert_eq!(AttestationCert::decode(&bytes).unwrap(), cert);
        assert!(AttestationCert::decode(&bytes[..100]).is_err());
    }

    #[test]
    fn cert_bit_flips_fail_check() {
        let mut w = world(5);
        let e = instantiate(&w.platform, b"fn", &mut w.rng).unwrap();
        let cert = w
            .ias
            .ias_verify(&produce_quote(&e, &w.platform).unwrap(), SimTime(1));
        let anchors = w.ias.anchors();
        let bytes = cert.encode();
        for byte in 0..bytes.len() {
            for bit in [0, 3, 7] {
                let mut flipped = bytes.clone();
                flipped[byte] ^= 1 << bit;
                if let Ok(c) = AttestationCert::decode(&flipped) {
                    assert!(
                        !check_cert(&c, &e.measurement(), &anchors),
                        "byte {byte} bit {bit}"
                    );
                }
            }
        }
    }

    #[test]
    fn seal_round_trip_and_failures() {
        let mut w = world(6);
        let e = instantiate(&w.platform, b"fn", &mut w.rng).unwrap();
        let other = instantiate(&w.platform, b"other", &mut w.rng).unwrap();
        let twin = instantiate(&w.platform, b"fn", &mut w.rng).unwrap();
        let blob = seal(&e, b"state", &mut w.rng);
        assert_eq!(unseal(&e, &blob).unwrap(), b"state");
        assert_eq!(unseal(&twin, &blob).unwrap(), b"state");
        assert_eq!(
            unseal(&other, &blob),
            Err(EnclaveError::MeasurementMismatch)
        );
        let mut flipped = blob.clone();
        flipped.ciphertext[0] ^= 1;
        assert_eq!(unseal(&e, &flipped), Err(EnclaveError::AuthFailure));
    }

    #[test]
    fn sealed_identity_restores_same_key() {
        let mut w = world(7);
        let e = instantiate(&w.platform, b"node", &mut w.rng).unwrap();
        let blob = e.seal_identity(&mut w.rng);
        assert!(!blob
            .ciphertext
            .windows(32)
            .any(|win| win == e.identity.secret_bytes().as_ref()));
        let back = Enclave::restore(&w.platform, b"node", &blob, &mut w.rng).unwrap();
        assert_eq!(back.public_key(), e.public_key());
        assert!(Enclave::restore(&w.platform, b"other", &blob, &mut w.rng).is_err());
    }

    #[test]
    fn channel_ends_agree_and_detect_tampering() {
        let mut w = world(8);
        let a = instantiate(&w.platform, b"a", &mut w.rng).unwrap();
        let b = instantiate(&w.platform, b"b", &mut w.rng).unwrap();
        let c = instantiate(&w.platform, b"c", &mut w.rng).unwrap();
        let cert_a = w
            .ias
            .ias_verify(&produce_quote(&a, &w.platform).unwrap(), SimTime(0));
        let cert_b = w
            .ias
            .ias_verify(&produce_quote(&b, &w.platform).unwrap(), SimTime(0));
        let ab = open_channel(&a, &cert_b).unwrap();
        let ba = open_channel(&b, &cert_a).unwrap();
        assert_eq!(ab.key_bytes(), ba.key_bytes());

        let msg = ab.seal(b"hello", b"aad", &mut w.rng);
        assert_eq!(ba.open(&msg, b"aad").unwrap(), b"hello");
        assert!(ba.open(&msg, b"other aad").is_err());
        let mut tampered = msg.clone();
        *tampered.last_mut().unwrap() ^= 1;
        assert_eq!(ba.open(&tampered, b"aad"), Err(EnclaveError::AuthFailure));

        // c talks to b's key but b expects a: different session keys.
        let cb = open_channel(&c, &cert_b).unwrap();
        assert!(ba.open(&cb.seal(b"x", b"", &mut w.rng), b"").is_err());
    }

    #[test]
    fn invalid_cert_refuses_channel() {
        let mut w = world(9);
        let a = instantiate(&w.platform, b"a", &mut w.rng).unwrap();
        let mut q = produce_quote(&a, &w.platform).unwrap();
        q.platform_sig[0] ^= 1;
        let cert = w.ias.ias_verify(&q, SimTime(0));
        assert_eq!(
            open_channel(&a, &cert).unwrap_err(),
            EnclaveError::HandshakeFailure
        );
    }

    #[test]
    fn had_delegation_amortizes_ias_calls() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let ias = AttestationService::new(&mut rng);
        let h1 = Host::new(1, &ias, &mut rng);
        let h2 = Host::new(2, &ias, &mut rng);
        let mut meter = CostMeter::new();
        let link = had_pair(&h1, &h2, &ias, SimTime(0), &mut meter).unwrap();
        assert_eq!(ias.call_count(), 2);
        let anchors = ias.anchors();
        for i in 0..5 {
            let p1 = instantiate(&h1.platform, b"app", &mut rng).unwrap();
            let p2 = instantiate(&h2.platform, b"app", &mut rng).unwrap();
            let mut m = CostMeter::new();
            let (c1, c2) =
                delegated_attest(&h1, &p1, &h2, &p2, &link, SimTime(i), &mut m, &mut rng).unwrap();
            assert!(c1.is_delegated() && c2.is_delegated());
            assert!(check_cert(&c1, &p1.measurement(), &anchors));
            assert!(check_cert(&c2, &p2.measurement(), &anchors));
            assert_eq!(m.ias_calls(), 0);
            assert_eq!(AttestationCert::decode(&c1.encode()).unwrap(), c1);
        }
        assert_eq!(ias.call_count(), 2);

        let h3 = Host::new(3, &ias, &mut rng);
        let p1 = instantiate(&h1.platform, b"app", &mut rng).unwrap();
        let p3 = instantiate(&h3.platform, b"app", &mut rng).unwrap();
        let err = delegated_attest(&h1, &p1, &h3, &p3, &link, SimTime(0), &mut meter, &mut rng)
            .unwrap_err();
        assert_eq!(err, EnclaveError::NoDelegationLink(1, 3));
    }

    #[test]
    fn delegated_cert_from_wrong_had_is_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let ias = AttestationService::new(&mut rng);
        let h1 = Host::new(1, &ias, &mut rng);
        let h2 = Host::new(2, &ias, &mut rng);
        let link = had_pair(&h1, &h2, &ias, SimTime(0), &mut CostMeter::new()).unwrap();
        let p1 = instantiate(&h1.platform, b"app", &mut rng).unwrap();
        let p2 = instantiate(&h2.platform, b"app", &mut rng).unwrap();
        let (mut c1, _) = delegated_attest(
            &h1,
            &p1,
            &h2,
            &p2,
            &link,
            SimTime(0),
            &mut CostMeter::new(),
            &mut rng,
        )
        .unwrap();
        // Re-sign with the process key instead of the HAD key.
        c1.ias_sig = p1.sign(&c1.signed_bytes());
        assert!(!check_cert(&c1, &p1.measurement(), &ias.anchors()));
    }
}
