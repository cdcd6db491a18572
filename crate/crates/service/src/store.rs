//! Flat content-addressed stores for artifacts and uploaded images.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use image::DynamicImage;
use sha2::{Digest, Sha256};

pub fn content_id(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Ids are lowercase hex SHA-256 digests; anything else is rejected before it
/// can reach the filesystem.
pub fn is_valid_id(id: &str) -> bool {
    id.len() == 64 && id.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if path.exists() {
        return Ok(());
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArtifactKind {
    Png,
    Csv,
}

impl ArtifactKind {
    const ALL: [ArtifactKind; 2] = [ArtifactKind::Png, ArtifactKind::Csv];

    pub fn extension(self) -> &'static str {
        match self {
            ArtifactKind::Png => "png",
            ArtifactKind::Csv => "csv",
        }
    }

    pub fn media_type(self) -> &'static str {
        match self {
            ArtifactKind::Png => "image/png",
            ArtifactKind::Csv => "text/csv; charset=utf-8",
        }
    }
}

/// Immutable artifacts stored as `<dir>/<sha256>.<ext>`.
#[derive(Clone)]
pub struct ArtifactStore {
    dir: PathBuf,
}

impl ArtifactStore {
    pub fn open(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn put(&self, bytes: &[u8], kind: ArtifactKind) -> std::io::Result<String> {
        let id = content_id(bytes);
        write_atomic(&self.dir.join(format!("{id}.{}", kind.extension())), bytes)?;
        Ok(id)
    }

    pub fn get(&self, id: &str) -> std::io::Result<Option<(ArtifactKind, Vec<u8>)>> {
        if !is_valid_id(id) {
            return Ok(None);
        }
        for kind in ArtifactKind::ALL {
            let path = self.dir.join(format!("{id}.{}", kind.extension()));
            match fs::read(&path) {
                Ok(bytes) => return Ok(Some((kind, bytes))),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => continue,
                Err(e) => return Err(e),
            }
        }
        Ok(None)
    }
}

/// Uploaded originals on disk plus decoded copies in memory.
#[derive(Clone)]
pub struct ImageStore {
    dir: PathBuf,
    decoded: Arc<RwLock<HashMap<String, Arc<DynamicImage>>>>,
}

pub struct StoredImage {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub created: bool,
}

impl ImageStore {
    pub fn open(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            decoded: Arc::default(),
        })
    }

    /// Decode and store; the id is the digest of the uploaded bytes.
    pub fn put(&self, bytes: &[u8]) -> Result<StoredImage, nanolens::Error> {
        let id = content_id(bytes);
        let img = image::load_from_memory(bytes).map_err(nanolens::Error::DecodeBytes)?;
        let path = self.dir.join(&id);
        let created = !path.exists();
        write_atomic(&path, bytes)?;
        let (width, height) = (img.width(), img.height());
        self.decoded
            .write()
            .expect("image cache lock")
            .insert(id.clone(), Arc::new(img));
        Ok(StoredImage {
            id,
            width,
            height,
            created,
        })
    }

    /// Look up a decoded image, falling back to the on-disk original so ids
    /// stay valid across restarts.
    pub fn get(&self, id: &str) -> Option<Arc<DynamicImage>> {
        if !is_valid_id(id) {
            return None;
        }
        if let Some(img) = self.decoded.read().expect("image cache lock").get(id) {
            return Some(img.clone());
        }
        let bytes = fs::read(self.dir.join(id)).ok()?;
        let img = Arc::new(image::load_from_memory(&bytes).ok()?);
        self.decoded
            .write()
            .expect("image cache lock")
            .insert(id.to_string(), img.clone());
        Some(img)
    }
}
