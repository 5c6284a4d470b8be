//! On-disk formats: binary motion files and the dataset directory.
//!
//! Motion file: `b"FMOT"`, then little-endian `u32` version, `u32` frames,
//! `u32` channels, `f32` fps, followed by `frames * channels` `f32` values in
//! row-major order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coretypes::{AudioFeatures, AuVocabulary, CoarseCondition, FineCondition, MotionSequence};
use crate::data::synthetic::{generate_clips, ClipRecord, LabelVocab, SyntheticSpec};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub const MOTION_MAGIC: &[u8; 4] = b"FMOT";
pub const MOTION_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

pub fn encode_motion<T: Scalar>(motion: &MotionSequence<T>) -> Vec<u8> {
    let f = motion.frames();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * f.len());
    out.extend_from_slice(MOTION_MAGIC);
    out.extend_from_slice(&MOTION_VERSION.to_le_bytes());
    out.extend_from_slice(&(f.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(f.cols() as u32).to_le_bytes());
    out.extend_from_slice(&(motion.fps() as f32).to_le_bytes());
    for &x in f.data() {
        out.extend_from_slice(&(x.to_f64_lossy() as f32).to_le_bytes());
    }
    out
}

pub fn decode_motion<T: Scalar>(bytes: &[u8]) -> Result<MotionSequence<T>> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MOTION_MAGIC {
        return Err(Error::Format("not a motion file".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != MOTION_VERSION {
        return Err(Error::Format(format!("motion file version {version}, expected {MOTION_VERSION}")));
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    let fps = f32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes")) as f64;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != rows * cols * 4 {
        return Err(Error::Format(format!(
            "header says {rows}x{cols} ({} bytes), payload has {} bytes",
            rows * cols * 4,
            payload.len()
        )));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for (k, chunk) in payload.chunks_exact(4).enumerate() {
        let x = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("motion entry ({}, {})", k / cols, k % cols)));
        }
        data.push(T::lit(x as f64));
    }
    MotionSequence::new(Tensor::from_vec(rows, cols, data)?, fps)
}

pub fn write_motion<T: Scalar>(path: &Path, motion: &MotionSequence<T>) -> Result<()> {
    fs::write(path, encode_motion(motion))?;
    Ok(())
}

pub fn read_motion<T: Scalar>(path: &Path) -> Result<MotionSequence<T>> {
    decode_motion(&fs::read(path)?)
}

/// Whitespace-separated text dump, one frame per line, for plotting and diffing.
pub fn motion_to_text<T: Scalar>(motion: &MotionSequence<T>) -> String {
    let f = motion.frames();
    let mut s = format!("# fps {}\n", motion.fps() as f32);
    for t in 0..f.rows() {
        let line: Vec<String> = f.row(t).iter().map(|x| format!("{}", x.to_f64_lossy() as f32)).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

pub fn motion_from_text<T: Scalar>(text: &str) -> Result<MotionSequence<T>> {
    let mut fps = crate::coretypes::DEFAULT_FPS;
    let mut rows = Vec::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("# fps ") {
            fps = rest.trim().parse::<f32>().map_err(|e| Error::Format(format!("fps: {e}")))? as f64;
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|w| w.parse::<f32>().map(|x| T::lit(x as f64)).map_err(|e| Error::Format(format!("{w:?}: {e}"))))
            .collect::<Result<Vec<T>>>()?;
        rows.push(row);
    }
    MotionSequence::new(Tensor::from_rows(&rows)?, fps)
}

/// Per-clip sidecar with everything except the motion itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub index: usize,
    pub seed: u64,
    pub coarse: CoarseCondition,
    pub tokens: Vec<usize>,
    pub audio: Vec<Vec<f64>>,
    pub events: FineCondition,
    pub fine: FineCondition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub motion: String,
    pub meta: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub spec: SyntheticSpec,
    pub dataset_hash: String,
    pub clips: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LABELS_FILE: &str = "labels.json";
pub const VOCAB_FILE: &str = "au_map.json";

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T: Scalar> {
    pub spec: SyntheticSpec,
    pub clips: Vec<ClipRecord<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn generate(spec: SyntheticSpec, vocab: &AuVocabulary) -> Result<Self> {
        let clips = generate_clips(&spec, vocab)?;
        Ok(Self { spec, clips })
    }

    pub fn labels(&self) -> LabelVocab {
        self.spec.labels()
    }

    /// Leading clips train, the trailing `val_fraction` validate.
    pub fn train(&self) -> &[ClipRecord<T>] {
        &self.clips[..self.clips.len() - self.spec.n_val().min(self.clips.len())]
    }

    pub fn val(&self) -> &[ClipRecord<T>] {
        &self.clips[self.clips.len() - self.spec.n_val().min(self.clips.len())..]
    }

    fn clip_files(clip: &ClipRecord<T>) -> Result<(Vec<u8>, Vec<u8>)> {
        let f = clip.audio.features();
        let meta = ClipMeta {
            index: clip.index,
            seed: clip.seed,
            coarse: clip.coarse,
            tokens: clip.tokens.clone(),
            audio: (0..f.rows()).map(|t| f.row(t).iter().map(|x| x.to_f64_lossy()).collect()).collect(),
            events: clip.events.clone(),
            fine: clip.fine.clone(),
        };
        Ok((encode_motion(&clip.motion), serde_json::to_vec_pretty(&meta)?))
    }

    /// SHA-256 over every clip's motion and sidecar bytes, in clip order.
    pub fn content_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for clip in &self.clips {
            let (m, j) = Self::clip_files(clip)?;
            h.update(Sha256::digest(&m));
            h.update(Sha256::digest(&j));
        }
        Ok(hex(&h.finalize()))
    }

    /// Writes the dataset directory. An existing non-empty directory is only
    /// replaced when `force` is set.
    pub fn save(&self, dir: &Path, vocab: &AuVocabulary, force: bool) -> Result<Manifest> {
        if dir.exists() && fs::read_dir(dir)?.next().is_some() {
            if !force {
                return Err(Error::Config(format!("{} exists and is not empty; pass force to overwrite", dir.display())));
            }
            fs::remove_dir_all(dir)?;
        }
        fs::create_dir_all(dir.join("clips"))?;
        let mut entries = Vec::with_capacity(self.clips.len());
        let mut h = Sha256::new();
        for clip in &self.clips {
            let (m, j) = Self::clip_files(clip)?;
            let motion = format!("clips/{:04}.motion", clip.index);
            let meta = format!("clips/{:04}.cond.json", clip.index);
            fs::write(dir.join(&motion), &m)?;
            fs::write(dir.join(&meta), &j)?;
            let (dm, dj) = (Sha256::digest(&m), Sha256::digest(&j));
            h.update(dm);
            h.update(dj);
            let mut per = Sha256::new();
            per.update(dm);
            per.update(dj);
            entries.push(ManifestEntry { index: clip.index, motion, meta, sha256: hex(&per.finalize()) });
        }
        let manifest = Manifest { format_version: 1, spec: self.spec.clone(), dataset_hash: hex(&h.finalize()), clips: entries };
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        fs::write(dir.join(LABELS_FILE), serde_json::to_string_pretty(&self.labels())?)?;
        fs::write(dir.join(VOCAB_FILE), vocab.to_json())?;
        Ok(manifest)
    }

    /// Loads and integrity-checks a dataset directory.
    pub fn load(dir: &Path) -> Result<(Self, AuVocabulary)> {
        let manifest = read_manifest(dir)?;
        let vocab = AuVocabulary::load(&dir.join(VOCAB_FILE))?;
        manifest.spec.validate(&vocab)?;
        let mut clips = Vec::with_capacity(manifest.clips.len());
        let mut whole = Sha256::new();
        for e in &manifest.clips {
            let m = fs::read(dir.join(&e.motion))?;
            let j = fs::read(dir.join(&e.meta))?;
            let (dm, dj) = (Sha256::digest(&m), Sha256::digest(&j));
            whole.update(dm);
            whole.update(dj);
            let mut per = Sha256::new();
            per.update(dm);
            per.update(dj);
            if hex(&per.finalize()) != e.sha256 {
                return Err(Error::Format(format!("clip {} does not match its manifest checksum", e.index)));
            }
            let motion = decode_motion::<T>(&m)?;
            let meta: ClipMeta = serde_json::from_slice(&j)?;
            let audio = Tensor::from_rows(&meta.audio.iter().map(|r| r.iter().map(|&x| T::lit(x)).collect()).collect::<Vec<_>>())?;
            clips.push(ClipRecord {
                index: meta.index,
                seed: meta.seed,
                tokens: meta.tokens,
                audio: AudioFeatures::new(audio)?,
                coarse: meta.coarse,
                motion,
                events: meta.events,
                fine: meta.fine,
            });
        }
        if hex(&whole.finalize()) != manifest.dataset_hash {
            return Err(Error::Format("dataset hash does not match manifest".into()));
        }
        Ok((Self { spec: manifest.spec, clips }, vocab))
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    Ok(serde_json::from_str(&text)?)
}

/// Regenerates the corpus from the manifest's spec and compares it with the
/// stored clips. Returns the indices that differ.
pub fn verify_dataset(dir: &Path) -> Result<Vec<usize>> {
    let (stored, vocab) = Dataset::<f64>::load(dir)?;
    let fresh = generate_clips::<f64>(&stored.spec, &vocab)?;
    if fresh.len() != stored.clips.len() {
        return Err(Error::Format(format!("manifest lists {} clips, spec generates {}", stored.clips.len(), fresh.len())));
    }
    Ok(stored.clips.iter().zip(&fresh).filter(|(a, b)| a != b).map(|(a, _)| a.index).collect())
}

pub fn default_dataset_dir(root: &Path) -> PathBuf {
    root.join("dataset")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn independent_parse(bytes: &[u8]) -> (usize, usize, Vec<f32>) {
        let mut cur = std::io::Cursor::new(bytes);
        let mut four = [0u8; 4];
        let mut next = |c: &mut std::io::Cursor<&[u8]>| {
            std::io::Read::read_exact(c, &mut four).unwrap();
            four
        };
        assert_eq!(&next(&mut cur), b"FMOT");
        let _version = u32::from_le_bytes(next(&mut cur));
        let rows = u32::from_le_bytes(next(&mut cur)) as usize;
        let cols = u32::from_le_bytes(next(&mut cur)) as usize;
        let _fps = f32::from_le_bytes(next(&mut cur));
        let vals = (0..rows * cols).map(|_| f32::from_le_bytes(next(&mut cur))).collect();
        (rows, cols, vals)
    }

    #[test]
    fn header_mismatch_is_a_format_error() {
        let m = MotionSequence::at_default_fps(Tensor::<f32>::full(3, 2, 0.5)).unwrap();
        let mut bytes = encode_motion(&m);
        bytes.pop();
        assert!(matches!(decode_motion::<f32>(&bytes), Err(Error::Format(_))));
        let mut bytes = encode_motion(&m);
        bytes[0] = b'X';
        assert!(matches!(decode_motion::<f32>(&bytes), Err(Error::Format(_))));
        let mut bytes = encode_motion(&m);
        bytes[8] = 4;
        assert!(matches!(decode_motion::<f32>(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn nan_payload_is_rejected_with_position() {
        let m = MotionSequence::at_default_fps(Tensor::<f32>::full(2, 2, 0.5)).unwrap();
        let mut bytes = encode_motion(&m);
        bytes[HEADER_LEN + 12..HEADER_LEN + 16].copy_from_slice(&f32::NAN.to_le_bytes());
        match decode_motion::<f32>(&bytes) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("(1, 1)"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn binary_and_text_readers_agree(seed in 0u64..500, rows in 1usize..20, cols in 1usize..60) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = MotionSequence::at_default_fps(Tensor::<f32>::uniform(rows, cols, 3.0, &mut rng)).unwrap();
            let bytes = encode_motion(&m);
            let back = decode_motion::<f32>(&bytes).unwrap();
            prop_assert_eq!(&back, &m);
            let (r, c, vals) = independent_parse(&bytes);
            prop_assert_eq!((r, c), (rows, cols));
            prop_assert_eq!(vals.as_slice(), m.frames().data());
            let text = motion_from_text::<f32>(&motion_to_text(&m)).unwrap();
            prop_assert_eq!(text, m);
        }
    }

    #[test]
    fn dataset_round_trip_and_verification() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds");
        let vocab = AuVocabulary::default_arkit();
        let spec = SyntheticSpec { n_clips: 6, seed: 11, ..Default::default() };
        let ds = Dataset::<f64>::generate(spec, &vocab).unwrap();
        let manifest = ds.save(&path, &vocab, false).unwrap();
        assert_eq!(manifest.dataset_hash, ds.content_hash().unwrap());
        let (back, v2) = Dataset::<f64>::load(&path).unwrap();
        assert_eq!(back, ds);
        assert_eq!(v2, vocab);
        assert!(verify_dataset(&path).unwrap().is_empty());
        assert!(ds.save(&path, &vocab, false).is_err());
        ds.save(&path, &vocab, true).unwrap();

        // Tamper with one clip.
        let f = path.join(&manifest.clips[2].motion);
        let mut bytes = fs::read(&f).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&f, bytes).unwrap();
        assert!(matches!(Dataset::<f64>::load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn splits_partition_the_clips() {
        let vocab = AuVocabulary::default_arkit();
        let ds = Dataset::<f64>::generate(SyntheticSpec { n_clips: 20, ..Default::default() }, &vocab).unwrap();
        assert_eq!(ds.train().len() + ds.val().len(), 20);
        assert_eq!(ds.val().len(), 2);
        assert_eq!(ds.val()[0].index, 18);
    }
}
