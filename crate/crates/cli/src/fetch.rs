//! Optional MNIST download with checksum verification.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::CliError;

/// SHA-256 of the decompressed IDX files.
pub const FILES: [(&str, &str); 4] = [
    ("train-images-idx3-ubyte", "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db"),
    ("train-labels-idx1-ubyte", "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5"),
    ("t10k-images-idx3-ubyte", "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7"),
    ("t10k-labels-idx1-ubyte", "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2"),
];

pub const DEFAULT_MIRROR: &str = "https://storage.googleapis.com/cvdf-datasets/mnist";

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Io { path: path.to_path_buf(), source }
}

fn gunzip(bytes: &[u8], what: &str) -> Result<Vec<u8>, CliError> {
    let mut out = Vec::new();
    flate2::read::GzDecoder::new(bytes)
        .read_to_end(&mut out)
        .map_err(|e| CliError::Fetch(format!("{what}: not a valid gzip stream: {e}")))?;
    Ok(out)
}

#[cfg(feature = "fetch")]
fn download(url: &str) -> Result<Vec<u8>, CliError> {
    let mut resp = ureq::get(url).call().map_err(|e| CliError::Fetch(format!("{url}: {e}")))?;
    resp.body_mut()
        .with_config()
        .limit(200 << 20)
        .read_to_vec()
        .map_err(|e| CliError::Fetch(format!("{url}: {e}")))
}

#[cfg(not(feature = "fetch"))]
fn download(url: &str) -> Result<Vec<u8>, CliError> {
    Err(CliError::Fetch(format!("{url}: built without HTTP support; point --mirror at a local directory")))
}

/// Raw IDX bytes of `name` from an HTTP(S) mirror (`<name>.gz`) or a local
/// directory holding either `<name>` or `<name>.gz`.
fn obtain(mirror: &str, name: &str) -> Result<Vec<u8>, CliError> {
    if mirror.starts_with("http://") || mirror.starts_with("https://") {
        let url = format!("{}/{name}.gz", mirror.trim_end_matches('/'));
        return gunzip(&download(&url)?, &url);
    }
    let dir = Path::new(mirror);
    let plain = dir.join(name);
    if plain.exists() {
        return fs::read(&plain).map_err(|e| io_err(&plain, e));
    }
    let gz = dir.join(format!("{name}.gz"));
    let bytes = fs::read(&gz).map_err(|e| io_err(&gz, e))?;
    gunzip(&bytes, &gz.display().to_string())
}

/// Place the four MNIST files in `dest`, skipping files that already verify.
/// Nothing is written for a file whose checksum does not match.
pub fn fetch(mirror: &str, dest: &Path) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(dest).map_err(|e| io_err(dest, e))?;
    let mut written = Vec::new();
    for (name, expected) in FILES {
        let target = dest.join(name);
        if let Ok(existing) = fs::read(&target) {
            if sha256_hex(&existing) == expected {
                eprintln!("{name}: present, checksum ok");
                continue;
            }
        }
        let bytes = obtain(mirror, name)?;
        let got = sha256_hex(&bytes);
        if got != expected {
            return Err(CliError::Fetch(format!("{name}: checksum mismatch (got {got}, expected {expected})")));
        }
        let tmp = dest.join(format!(".{name}.part"));
        fs::write(&tmp, &bytes).map_err(|e| io_err(&tmp, e))?;
        fs::rename(&tmp, &target).map_err(|e| io_err(&target, e))?;
        eprintln!("{name}: fetched, checksum ok");
        written.push(target);
    }
    Ok(written)
}
