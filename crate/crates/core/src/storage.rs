//! Public capsule store. It never sees keys or plaintext.
//!
//! Capsule encoding: `id(16) ∥ threshold(4) ∥ policy ∥ len(4) ∥ ciphertext`,
//! with the policy in its TLV form.
//!
//! Persistence file: a sequence of records
//! `key_len(4) ∥ key ∥ value_len(4) ∥ value`, one per successful store, where
//! the key is the 16-byte capsule id and the value the capsule encoding.
//! Replayed in order on open.
//!
//! Request framing: `0x01 ∥ len(4) ∥ capsule` stores, `0x02 ∥ id(16)`
//! retrieves. Responses: `0x00` stored, `0x01 ∥ len(4) ∥ capsule` found,
//! `0x02` key exists, `0x03` not found, `0x04` malformed request.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Mutex;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{XChaCha20Poly1305, XNonce};
use rand::{CryptoRng, RngCore};
use thiserror::Error;

use crate::policy::{AccessPolicy, CapsuleId, PolicyError};
use crate::wire::{Reader, WireError, Writer};

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("capsule {0:?} already stored")]
    KeyExists(CapsuleId),
    #[error("capsule {0:?} not found")]
    NotFound(CapsuleId),
    #[error("persistence file is corrupt: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Capsule {
    pub id: CapsuleId,
    pub ciphertext: Vec<u8>,
    pub policy: AccessPolicy,
    pub threshold: u32,
}

impl Capsule {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(64 + self.ciphertext.len());
        w.raw(&self.id.0).u32(self.threshold);
        self.policy.encode_into(&mut w);
        w.bytes(&self.ciphertext);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, StorageError> {
        let mut r = Reader::new(bytes);
        let id = CapsuleId(r.array()?);
        let threshold = r.u32()?;
        let policy = AccessPolicy::decode_from(&mut r)?;
        let ciphertext = r.bytes()?.to_vec();
        r.finish()?;
        Ok(Self {
            id,
            ciphertext,
            policy,
            threshold,
        })
    }
}

pub const DATA_KEY_LEN: usize = 32;

/// `nonce(24) ∥ AEAD(key, data)` with the capsule id as associated data.
pub fn encrypt_data<R: RngCore + CryptoRng>(
    key: &[u8; DATA_KEY_LEN],
    id: &CapsuleId,
    data: &[u8],
    rng: &mut R,
) -> Vec<u8> {
    let mut nonce = [0u8; 24];
    rng.fill_bytes(&mut nonce);
    let ct = XChaCha20Poly1305::new(key.into())
        .encrypt(
            XNonce::from_slice(&nonce),
            Payload {
                msg: data,
                aad: &id.0,
            },
        )
        .expect("encryption with a valid key cannot fail");
    let mut out = nonce.to_vec();
    out.extend_from_slice(&ct);
    out
}

/// `None` if the key is wrong or the ciphertext was altered.
pub fn decrypt_data(key: &[u8], id: &CapsuleId, ciphertext: &[u8]) -> Option<Vec<u8>> {
    if key.len() != DATA_KEY_LEN || ciphertext.len() < 24 + 16 {
        return None;
    }
    let (nonce, ct) = ciphertext.split_at(24);
    XChaCha20Poly1305::new(key.into())
        .decrypt(
            XNonce::from_slice(nonce),
            Payload {
                msg: ct,
                aad: &id.0,
            },
        )
        .ok()
}

struct Inner {
    map: BTreeMap<CapsuleId, Capsule>,
    file: Option<File>,
}

/// Linearizable key-value store: one lock guards both map and file.
pub struct StorageServer {
    inner: Mutex<Inner>,
}

impl Default for StorageServer {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl std::fmt::Debug for StorageServer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StorageServer")
            .field("len", &self.len())
            .finish()
    }
}

impl StorageServer {
    pub fn in_memory() -> Self {
        Self {
            inner: Mutex::new(Inner {
                map: BTreeMap::new(),
                file: None,
            }),
        }
    }

    /// Opens (or creates) an append-only file and replays it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StorageError> {
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf)?;
        let mut map = BTreeMap::new();
        let mut r = Reader::new(&buf);
        while r.remaining() > 0 {
            let key = r
                .bytes()
                .map_err(|e| StorageError::Corrupt(e.to_string()))?;
            let value = r
                .bytes()
                .map_err(|e| StorageError::Corrupt(e.to_string()))?;
            let capsule = Capsule::decode(value)?;
            if key != capsule.id.0 {
                return Err(StorageError::Corrupt(
                    "record key does not match capsule id".into(),
                ));
            }
            if map.insert(capsule.id, capsule).is_some() {
                return Err(StorageError::Corrupt("duplicate record".into()));
            }
        }
        Ok(Self {
            inner: Mutex::new(Inner {
                map,
                file: Some(file),
            }),
        })
    }

    pub fn store(&self, capsule: Capsule) -> Result<(), StorageError> {
        let mut inner = self.inner.lock().unwrap();
        if inner.map.contains_key(&capsule.id) {
            return Err(StorageError::KeyExists(capsule.id));
        }
        if let Some(file) = inner.file.as_mut() {
            let mut w = Writer::new();
            w.bytes(&capsule.id.0).bytes(&capsule.encode());
            file.write_all(&w.finish())?;
            file.flush()?;
        }
        inner.map.insert(capsule.id, capsule);
        Ok(())
    }

    pub fn retrieve(&self, id: &CapsuleId) -> Result<Capsule, StorageError> {
        self.inner
            .lock()
            .unwrap()
            .map
            .get(id)
            .cloned()
            .ok_or(StorageError::NotFound(*id))
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Serves one framed request.
    pub fn handle_request(&self, request: &[u8]) -> Vec<u8> {
        let response = match StorageRequest::decode(request) {
            Err(_) => StorageResponse::BadRequest,
            Ok(StorageRequest::Store(c)) => match self.store(c) {
                Ok(()) => StorageResponse::Stored,
                Err(StorageError::KeyExists(_)) => StorageResponse::KeyExists,
                Err(_) => StorageResponse::BadRequest,
            },
            Ok(StorageRequest::Retrieve(id)) => match self.retrieve(&id) {
                Ok(c) => StorageResponse::Found(c),
                Err(_) => StorageResponse::NotFound,
            },
        };
        response.encode()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StorageRequest {
    Store(Capsule),
    Retrieve(CapsuleId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StorageResponse {
    Stored,
    Found(Capsule),
    KeyExists,
    NotFound,
    BadRequest,
}

impl StorageRequest {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            Self::Store(c) => w.u8(0x01).bytes(&c.encode()),
            Self::Retrieve(id) => w.u8(0x02).raw(&id.0),
        };
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, StorageError> {
        let mut r = Reader::new(bytes);
        let req = match r.u8()? {
            0x01 => Self::Store(Capsule::decode(r.bytes()?)?),
            0x02 => Self::Retrieve(CapsuleId(r.array()?)),
            tag => {
                return Err(WireError::UnknownTag {
                    what: "storage request",
                    tag,
                }
                .into())
            }
        };
        r.finish()?;
        Ok(req)
    }
}

impl StorageResponse {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            Self::Stored => w.u8(0x00),
            Self::Found(c) => w.u8(0x01).bytes(&c.encode()),
            Self::KeyExists => w.u8(0x02),
            Self::NotFound => w.u8(0x03),
            Self::BadRequest => w.u8(0x04),
        };
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, StorageError> {
        let mut r = Reader::new(bytes);
        let resp = match r.u8()? {
            0x00 => Self::Stored,
            0x01 => Self::Found(Capsule::decode(r.bytes()?)?),
            0x02 => Self::KeyExists,
            0x03 => Self::NotFound,
            0x04 => Self::BadRequest,
            tag => {
                return Err(WireError::UnknownTag {
                    what: "storage response",
                    tag,
                }
                .into())
            }
        };
        r.finish()?;
        Ok(resp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enclave::Measurement;
    use crate::policy::ExpiryCondition;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn capsule(id: u8, rng: &mut ChaCha20Rng) -> (Capsule, [u8; 32]) {
        let mut key = [0u8; 32];
        rng.fill_bytes(&mut key);
        let cid = CapsuleId([id; 16]);
        let policy =
            AccessPolicy::new([Measurement::of(b"fn")], ExpiryCondition::MaxAccesses(1)).unwrap();
        let ct = encrypt_data(&key, &cid, b"secret data", rng);
        (
            Capsule {
                id: cid,
                ciphertext: ct,
                policy,
                threshold: 3,
            },
            key,
        )
    }

    #[test]
    fn store_retrieve_and_duplicates() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let s = StorageServer::in_memory();
        let (c, _) = capsule(1, &mut rng);
        s.store(c.clone()).unwrap();
        assert_eq!(s.retrieve(&c.id).unwrap(), c);
        assert_eq!(s.retrieve(&c.id).unwrap(), c);
        assert!(matches!(
            s.store(c.clone()),
            Err(StorageError::KeyExists(_))
        ));
        assert!(matches!(
            s.retrieve(&CapsuleId([9; 16])),
            Err(StorageError::NotFound(_))
        ));
    }

    #[test]
    fn ciphertext_needs_the_key() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let (c, key) = capsule(1, &mut rng);
        assert_eq!(
            decrypt_data(&key, &c.id, &c.ciphertext).unwrap(),
            b"secret data"
        );
        assert!(decrypt_data(&[0; 32], &c.id, &c.ciphertext).is_none());
        assert!(decrypt_data(&key, &CapsuleId([2; 16]), &c.ciphertext).is_none());
        assert!(!c.encode().windows(11).any(|w| w == b"secret data"));
    }

    #[test]
    fn persistence_survives_restart() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("capsules.log");
        let (a, _) = capsule(1, &mut rng);
        let (b, _) = capsule(2, &mut rng);
        {
            let s = StorageServer::open(&path).unwrap();
            s.store(a.clone()).unwrap();
            s.store(b.clone()).unwrap();
            assert!(s.store(a.clone()).is_err());
        }
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], &[0, 0, 0, 16]);
        assert_eq!(&bytes[4..20], &a.id.0);
        let value_len = u32::from_be_bytes(bytes[20..24].try_into().unwrap()) as usize;
        assert_eq!(&bytes[24..24 + value_len], a.encode().as_slice());

        let s = StorageServer::open(&path).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.retrieve(&b.id).unwrap(), b);

        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            StorageServer::open(&path),
            Err(StorageError::Corrupt(_))
        ));
    }

    #[test]
    fn framed_requests() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let s = StorageServer::in_memory();
        let (c, _) = capsule(5, &mut rng);
        let store = StorageRequest::Store(c.clone()).encode();
        assert_eq!(
            StorageResponse::decode(&s.handle_request(&store)).unwrap(),
            StorageResponse::Stored
        );
        assert_eq!(
            StorageResponse::decode(&s.handle_request(&store)).unwrap(),
            StorageResponse::KeyExists
        );
        let get = StorageRequest::Retrieve(c.id).encode();
        assert_eq!(
            StorageResponse::decode(&s.handle_request(&get)).unwrap(),
            StorageResponse::Found(c)
        );
        let missing = StorageRequest::Retrieve(CapsuleId([0; 16])).encode();
        assert_eq!(
            StorageResponse::decode(&s.handle_request(&missing)).unwrap(),
            StorageResponse::NotFound
        );
        assert_eq!(
            StorageResponse::decode(&s.handle_request(&[0x07])).unwrap(),
            StorageResponse::BadRequest
        );
    }

    #[test]
    fn concurrent_stores_are_linearizable() {
        let s = std::sync::Arc::new(StorageServer::in_memory());
        let handles: Vec<_> = (0..8)
            .map(|t| {
                let s = s.clone();
                std::thread::spawn(move || {
                    let mut rng = ChaCha20Rng::seed_from_u64(t);
                    // All threads race on the same 4 ids.
                    (0..4u8)
                        .filter(|i| s.store(capsule(*i, &mut rng).0).is_ok())
                        .count()
                })
            })
            .collect();
        let wins: usize = handles.into_iter().map(|h| h.join().unwrap()).sum();
        assert_eq!(wins, 4);
        assert_eq!(s.len(), 4);
    }
}
