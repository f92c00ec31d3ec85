use std::collections::BTreeMap;
use std::io::Read;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::DockerError;

/// `sha256:<hex>` over the given bytes.
pub fn digest_of(bytes: &[u8]) -> String {
    format!("sha256:{}", hex::encode(Sha256::digest(bytes)))
}

/// The hex part of a digest, used as a file name.
pub fn digest_hex(digest: &str) -> &str {
    digest.strip_prefix("sha256:").unwrap_or(digest)
}

/// Stored under `/images/manifest/<name>_<tag>.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageManifest {
    pub name: String,
    pub tag: String,
    /// Absolute path of the entry script inside the rootfs.
    pub entry: String,
    /// Layer digests, lowest first.
    pub layers: Vec<String>,
    pub config: String,
}

impl ImageManifest {
    pub fn reference(&self) -> String {
        format!("{}:{}", self.name, self.tag)
    }

    pub fn file_name(&self) -> String {
        manifest_file_name(&self.reference())
    }
}

pub fn manifest_file_name(reference: &str) -> String {
    let (name, tag) = split_reference(reference);
    format!("{}_{}.json", name.replace('/', "_"), tag)
}

/// `name[:tag]`, tag defaulting to `latest`.
pub fn split_reference(reference: &str) -> (&str, &str) {
    match reference.rsplit_once(':') {
        Some((n, t)) if !t.contains('/') => (n, t),
        _ => (reference, "latest"),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageConfig {
    pub env: Vec<String>,
    pub working_dir: String,
}

/// Uncompressed tar of one layer with fixed metadata, so equal contents
/// give equal digests.
pub fn layer_tar(files: &BTreeMap<String, Vec<u8>>) -> Vec<u8> {
    let mut b = tar::Builder::new(Vec::new());
    for (path, data) in files {
        let mut h = tar::Header::new_ustar();
        h.set_size(data.len() as u64);
        h.set_mode(0o755);
        h.set_mtime(0);
        h.set_uid(0);
        h.set_gid(0);
        h.set_entry_type(tar::EntryType::Regular);
        b.append_data(&mut h, path.trim_start_matches('/'), data.as_slice())
            .expect("in-memory tar");
    }
    b.into_inner().expect("in-memory tar")
}

/// Regular files of a layer tar, keyed by absolute path.
pub fn untar(bytes: &[u8]) -> Result<BTreeMap<String, Vec<u8>>, DockerError> {
    let bad = |e: std::io::Error| DockerError::MalformedRequest(format!("layer tar: {e}"));
    let mut out = BTreeMap::new();
    let mut ar = tar::Archive::new(bytes);
    for entry in ar.entries().map_err(bad)? {
        let mut entry = entry.map_err(bad)?;
        if entry.header().entry_type() != tar::EntryType::Regular {
            continue;
        }
        let path = entry.path().map_err(bad)?.to_string_lossy().into_owned();
        let mut data = Vec::new();
        entry.read_to_end(&mut data).map_err(bad)?;
        out.insert(format!("/{}", path.trim_start_matches('/')), data);
    }
    Ok(out)
}

/// A manifest with every blob it references; the body of a pull.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageArchive {
    pub manifest: ImageManifest,
    pub blobs: BTreeMap<String, Vec<u8>>,
}

impl ImageArchive {
    /// Serializes as a tar holding `manifest.json` and `blobs/sha256/<hex>`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut files = BTreeMap::new();
        files.insert(
            "manifest.json".to_string(),
            serde_json::to_vec(&self.manifest).expect("manifest serializes"),
        );
        for (digest, data) in &self.blobs {
            files.insert(format!("blobs/sha256/{}", digest_hex(digest)), data.clone());
        }
        layer_tar(&files)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DockerError> {
        if bytes.is_empty() || !bytes.len().is_multiple_of(512) {
            return Err(DockerError::MalformedRequest(format!(
                "image archive of {} bytes",
                bytes.len()
            )));
        }
        let mut files = untar(bytes)?;
        let manifest = files
            .remove("/manifest.json")
            .ok_or_else(|| DockerError::MalformedRequest("archive has no manifest.json".into()))?;
        let manifest: ImageManifest = serde_json::from_slice(&manifest)
            .map_err(|e| DockerError::MalformedRequest(format!("manifest: {e}")))?;
        let blobs = files
            .into_iter()
            .filter_map(|(p, d)| {
                p.strip_prefix("/blobs/sha256/")
                    .map(|h| (format!("sha256:{h}"), d))
            })
            .collect();
        Ok(Self { manifest, blobs })
    }

    /// Every referenced blob is present and hashes to its name.
    pub fn verify(&self) -> Result<(), DockerError> {
        for digest in self.manifest.layers.iter().chain([&self.manifest.config]) {
            let data = self
                .blobs
                .get(digest)
                .ok_or_else(|| DockerError::MissingBlob(digest.clone()))?;
            let actual = digest_of(data);
            if &actual != digest {
                return Err(DockerError::DigestMismatch {
                    expected: digest.clone(),
                    actual,
                });
            }
        }
        Ok(())
    }
}

/// Assembles an image from in-memory layers.
#[derive(Debug, Clone)]
pub struct ImageBuilder {
    name: String,
    tag: String,
    entry: String,
    config: ImageConfig,
    layers: Vec<BTreeMap<String, Vec<u8>>>,
}

impl ImageBuilder {
    pub fn new(reference: &str) -> Self {
        let (name, tag) = split_reference(reference);
        Self {
            name: name.to_string(),
            tag: tag.to_string(),
            entry: "/entrypoint.sh".to_string(),
            config: ImageConfig::default(),
            layers: Vec::new(),
        }
    }

    pub fn entry(mut self, entry: &str) -> Self {
        self.entry = entry.to_string();
        self
    }

    pub fn env(mut self, kv: &str) -> Self {
        self.config.env.push(kv.to_string());
        self
    }

    pub fn layer<P: AsRef<str>, D: AsRef<[u8]>>(
        mut self,
        files: impl IntoIterator<Item = (P, D)>,
    ) -> Self {
        self.layers.push(
            files
                .into_iter()
                .map(|(p, d)| {
                    (
                        format!("/{}", p.as_ref().trim_start_matches('/')),
                        d.as_ref().to_vec(),
                    )
                })
                .collect(),
        );
        self
    }

    pub fn build(self) -> ImageArchive {
        let mut blobs = BTreeMap::new();
        let mut layers = Vec::new();
        for files in &self.layers {
            let tar = layer_tar(files);
            let d = digest_of(&tar);
            layers.push(d.clone());
            blobs.insert(d, tar);
        }
        let config = serde_json::to_vec(&self.config).expect("config serializes");
        let config_digest = digest_of(&config);
        blobs.insert(config_digest.clone(), config);
        ImageArchive {
            manifest: ImageManifest {
                name: self.name,
                tag: self.tag,
                entry: self.entry,
                layers,
                config: config_digest,
            },
            blobs,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            digest_of(b"abc"),
            "sha256:ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn reference_split() {
        assert_eq!(split_reference("redis:7"), ("redis", "7"));
        assert_eq!(split_reference("redis"), ("redis", "latest"));
        assert_eq!(
            split_reference("localhost:5000/app"),
            ("localhost:5000/app", "latest")
        );
    }

    #[test]
    fn layer_tar_is_deterministic_and_round_trips() {
        let files: BTreeMap<String, Vec<u8>> = [
            ("/bin/sh".to_string(), b"x".to_vec()),
            ("/etc/os".to_string(), vec![]),
        ]
        .into_iter()
        .collect();
        assert_eq!(layer_tar(&files), layer_tar(&files));
        assert_eq!(untar(&layer_tar(&files)).unwrap(), files);
    }

    #[test]
    fn archive_round_trip_and_verify() {
        let img = ImageBuilder::new("app:v1")
            .layer([("/a", "1")])
            .layer([("/b", "2")])
            .build();
        assert_eq!(img.manifest.layers.len(), 2);
        let back = ImageArchive::from_bytes(&img.to_bytes()).unwrap();
        assert_eq!(back, img);
        back.verify().unwrap();
    }

    #[test]
    fn corrupted_layer_is_detected() {
        let mut img = ImageBuilder::new("app").layer([("/a", "1")]).build();
        let d = img.manifest.layers[0].clone();
        img.blobs.get_mut(&d).unwrap()[600] ^= 1;
        assert!(matches!(
            img.verify(),
            Err(DockerError::DigestMismatch { .. })
        ));
    }
}
