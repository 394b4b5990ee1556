//! Exact and perceptual sample fingerprints and the per-subset index that
//! the signature oracles query.

use std::collections::HashMap;
use std::fmt;
use std::hint::black_box;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha1::{Digest as _, Sha1};

use crate::dataset::{Partition, Sample};
use crate::error::{Error, Result};
use crate::par;

/// SHA-1 digest of a sample's pixel bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest(pub [u8; 20]);

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({self})")
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

/// 64-bit perceptual hash. Bit 0 of the row-major coefficient order is the
/// most significant bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PHash64(pub u64);

/// Digest of the canonical serialization: pixels row-major, channels
/// interleaved, label and id excluded.
pub fn exact_digest(x: &Sample) -> Digest {
    Digest(Sha1::digest(&x.pixels).into())
}

const HASH_SIDE: usize = 32;
const BLOCK: usize = 8;

fn cosine_table() -> &'static [[f64; HASH_SIDE]; BLOCK] {
    static TABLE: OnceLock<[[f64; HASH_SIDE]; BLOCK]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [[0.0; HASH_SIDE]; BLOCK];
        for (u, row) in t.iter_mut().enumerate() {
            for (n, v) in row.iter_mut().enumerate() {
                *v = (std::f64::consts::PI * (2 * n + 1) as f64 * u as f64 / (2 * HASH_SIDE) as f64).cos();
            }
        }
        t
    })
}

fn luma(x: &Sample) -> Vec<f64> {
    let c = x.shape.channels;
    x.pixels
        .chunks_exact(c)
        .map(|p| match c {
            1 => p[0] as f64,
            2 => (p[0] as f64 + p[1] as f64) / 2.0,
            _ => 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64,
        })
        .collect()
}

fn axis_weights(n_in: usize) -> Vec<(usize, usize, f64)> {
    (0..HASH_SIDE)
        .map(|o| {
            let s = ((o as f64 + 0.5) * n_in as f64 / HASH_SIDE as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = s.floor() as usize;
            (i0, (i0 + 1).min(n_in - 1), s - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of a grayscale plane to 32×32 with pixel-centre alignment.
fn resize(gray: &[f64], h: usize, w: usize) -> Vec<f64> {
    let ys = axis_weights(h);
    let xs = axis_weights(w);
    let mut out = Vec::with_capacity(HASH_SIDE * HASH_SIDE);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = gray[y0 * w + x0] * (1.0 - fx) + gray[y0 * w + x1] * fx;
            let bottom = gray[y1 * w + x0] * (1.0 - fx) + gray[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// The top-left 8×8 block of the unnormalized 2-D DCT-II, row-major.
fn low_dct(plane: &[f64]) -> [f64; BLOCK * BLOCK] {
    let cos = cosine_table();
    let mut partial = [[0.0; HASH_SIDE]; BLOCK];
    for (u, row) in partial.iter_mut().enumerate() {
        for y in 0..HASH_SIDE {
            let c = cos[u][y];
            for (x, acc) in row.iter_mut().enumerate() {
                *acc += c * plane[y * HASH_SIDE + x];
            }
        }
    }
    let mut out = [0.0; BLOCK * BLOCK];
    for u in 0..BLOCK {
        for v in 0..BLOCK {
            out[u * BLOCK + v] = partial[u].iter().zip(&cos[v]).map(|(a, b)| a * b).sum();
        }
    }
    out
}

/// Perceptual hash: luma, bilinear resize to 32×32, 2-D DCT-II, top-left
/// 8×8 block, bit set where a coefficient exceeds the block median.
pub fn perceptual_hash(x: &Sample) -> PHash64 {
    let plane = resize(&luma(x), x.shape.height, x.shape.width);
    let mut coeffs = low_dct(&plane);
    let scale = plane.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
    for c in coeffs.iter_mut() {
        if c.abs() <= 1e-9 * scale {
            *c = 0.0;
        }
    }
    let mut sorted = coeffs;
    sorted.sort_by(f64::total_cmp);
    let median = (sorted[31] + sorted[32]) / 2.0;
    let bits = coeffs
        .iter()
        .enumerate()
        .fold(0u64, |acc, (i, &c)| acc | (((c > median) as u64) << (63 - i)));
    PHash64(bits)
}

/// Differing bits between two hashes.
#[inline]
pub fn hamming_bits(a: PHash64, b: PHash64) -> u32 {
    (a.0 ^ b.0).count_ones()
}

/// Normalized Hamming distance in [0, 1].
#[inline]
pub fn hamming_norm(a: PHash64, b: PHash64) -> f64 {
    hamming_bits(a, b) as f64 / 64.0
}

/// Exact-lookup strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LookupMode {
    HashTable,
    SortedScan,
    ConstantTimeScan,
}

impl LookupMode {
    fn code(self) -> u8 {
        match self {
            LookupMode::HashTable => 0,
            LookupMode::SortedScan => 1,
            LookupMode::ConstantTimeScan => 2,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(LookupMode::HashTable),
            1 => Ok(LookupMode::SortedScan),
            2 => Ok(LookupMode::ConstantTimeScan),
            other => Err(Error::Format(format!("unknown lookup mode {other}"))),
        }
    }
}

impl std::str::FromStr for LookupMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hash_table" => Ok(LookupMode::HashTable),
            "sorted_scan" => Ok(LookupMode::SortedScan),
            "constant_time_scan" => Ok(LookupMode::ConstantTimeScan),
            other => Err(Error::InvalidConfig(format!("unknown lookup mode `{other}`"))),
        }
    }
}

/// Per-subset digests and perceptual hashes, in partition order.
#[derive(Debug, Clone)]
pub struct SignatureIndex {
    mode: LookupMode,
    digests: Vec<Vec<Digest>>,
    hashes: Vec<Vec<PHash64>>,
    table: HashMap<Digest, usize>,
    sorted: Vec<Vec<Digest>>,
}

impl PartialEq for SignatureIndex {
    fn eq(&self, other: &Self) -> bool {
        self.mode == other.mode && self.digests == other.digests && self.hashes == other.hashes
    }
}

const MAGIC: &[u8; 4] = b"SIGX";
const VERSION: u32 = 1;

/// Fingerprints every member of `p`.
pub fn build_signature_index(p: &Partition, mode: LookupMode) -> SignatureIndex {
    let digests = p.subsets().iter().map(|d| par::map(d.samples(), exact_digest)).collect();
    let hashes = p.subsets().iter().map(|d| par::map(d.samples(), perceptual_hash)).collect();
    SignatureIndex::from_parts(mode, digests, hashes)
}

impl SignatureIndex {
    fn from_parts(mode: LookupMode, digests: Vec<Vec<Digest>>, hashes: Vec<Vec<PHash64>>) -> Self {
        let mut table = HashMap::with_capacity(digests.iter().map(Vec::len).sum());
        for (i, subset) in digests.iter().enumerate() {
            for d in subset {
                table.entry(*d).or_insert(i);
            }
        }
        let sorted = digests
            .iter()
            .map(|subset| {
                let mut s = subset.clone();
                s.sort_unstable();
                s
            })
            .collect();
        SignatureIndex {
            mode,
            digests,
            hashes,
            table,
            sorted,
        }
    }

    pub fn mode(&self) -> LookupMode {
        self.mode
    }

    /// Same contents, different exact-lookup strategy.
    pub fn with_mode(mut self, mode: LookupMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn num_subsets(&self) -> usize {
        self.digests.len()
    }

    pub fn subset_digests(&self, i: usize) -> &[Digest] {
        &self.digests[i]
    }

    pub fn subset_hashes(&self, i: usize) -> &[PHash64] {
        &self.hashes[i]
    }

    pub fn len(&self) -> usize {
        self.digests.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Subset holding `d`, if any.
    pub fn lookup_exact(&self, d: &Digest) -> Option<usize> {
        match self.mode {
            LookupMode::HashTable => self.table.get(d).copied(),
            LookupMode::SortedScan => self.sorted.iter().position(|s| s.binary_search(d).is_ok()),
            LookupMode::ConstantTimeScan => self.scan_all(d),
        }
    }

    /// Compares against every stored digest with no data-dependent branch
    /// or early exit.
    fn scan_all(&self, d: &Digest) -> Option<usize> {
        let query = black_box(d.0);
        let mut found = 0u64;
        for (i, subset) in self.digests.iter().enumerate() {
            let tag = i as u64 + 1;
            for entry in subset {
                let diff = entry.0.iter().zip(&query).fold(0u8, |acc, (a, b)| acc | (a ^ b));
                // all-ones when diff == 0
                let hit = ((diff as u64).wrapping_sub(1) >> 63).wrapping_neg();
                found |= hit & tag;
            }
        }
        match black_box(found) {
            0 => None,
            tag => Some(tag as usize - 1),
        }
    }

    /// Subset of the nearest stored hash within `tau_h`; ties go to the
    /// lowest subset, then the earliest entry.
    pub fn lookup_approx(&self, h: PHash64, tau_h: f64) -> Option<usize> {
        let mut best: Option<(u32, usize)> = None;
        for (i, subset) in self.hashes.iter().enumerate() {
            for &entry in subset {
                let bits = hamming_bits(entry, h);
                if bits as f64 / 64.0 <= tau_h && best.is_none_or(|(b, _)| bits < b) {
                    best = Some((bits, i));
                }
            }
        }
        best.map(|(_, i)| i)
    }

    /// Binary layout (little-endian): magic `SIGX`, u32 version, u8 mode,
    /// u32 subset count, u64 per-subset counts, raw 20-byte digests, raw u64
    /// hashes.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&[self.mode.code()])?;
        w.write_all(&(self.digests.len() as u32).to_le_bytes())?;
        for subset in &self.digests {
            w.write_all(&(subset.len() as u64).to_le_bytes())?;
        }
        for d in self.digests.iter().flatten() {
            w.write_all(&d.0)?;
        }
        for h in self.hashes.iter().flatten() {
            w.write_all(&h.0.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a signature index file".into()));
        }
        let mut word = [0u8; 4];
        read_exact(&mut r, &mut word)?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported signature index version {version}")));
        }
        let mut byte = [0u8; 1];
        read_exact(&mut r, &mut byte)?;
        let mode = LookupMode::from_code(byte[0])?;
        read_exact(&mut r, &mut word)?;
        let n = u32::from_le_bytes(word) as usize;
        let mut counts = Vec::with_capacity(n);
        let mut long = [0u8; 8];
        for _ in 0..n {
            read_exact(&mut r, &mut long)?;
            counts.push(u64::from_le_bytes(long) as usize);
        }
        let mut digests = Vec::with_capacity(n);
        for &c in &counts {
            let mut subset = Vec::with_capacity(c);
            for _ in 0..c {
                let mut d = [0u8; 20];
                read_exact(&mut r, &mut d)?;
                subset.push(Digest(d));
            }
            digests.push(subset);
        }
        let mut hashes = Vec::with_capacity(n);
        for &c in &counts {
            let mut subset = Vec::with_capacity(c);
            for _ in 0..c {
                read_exact(&mut r, &mut long)?;
                subset.push(PHash64(u64::from_le_bytes(long)));
            }
            hashes.push(subset);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after signature index", rest.len())));
        }
        Ok(SignatureIndex::from_parts(mode, digests, hashes))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated signature index".into()),
        _ => Error::Io(e),
    })
}
