//! Idempotent download into a cache directory with a sha256 sidecar.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::fail::{Failure, Outcome};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FetchStatus {
    Cached,
    Downloaded,
}

pub fn sha256_file(path: &Path) -> Outcome<String> {
    let mut file = fs::File::open(path).map_err(|e| Failure::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| Failure::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".sha256");
    path.with_file_name(name)
}

fn read_sidecar(path: &Path) -> Option<String> {
    let text = fs::read_to_string(sidecar(path)).ok()?;
    text.split_whitespace().next().map(str::to_ascii_lowercase)
}

fn write_sidecar(path: &Path, digest: &str) -> Outcome<()> {
    let side = sidecar(path);
    let name = path.file_name().unwrap_or_default().to_string_lossy();
    fs::write(&side, format!("{digest}  {name}\n")).map_err(|e| Failure::io(&side, e))
}

/// File name used in the cache for `url`.
pub fn file_name_for(url: &str) -> Option<String> {
    let trimmed = url.split(['?', '#']).next().unwrap_or(url);
    trimmed
        .rsplit('/')
        .next()
        .filter(|s| !s.is_empty())
        .map(str::to_string)
}

fn download(url: &str, dest: &Path) -> Outcome<()> {
    let local = url.strip_prefix("file://").map(PathBuf::from).or_else(|| {
        (!url.contains("://")).then(|| PathBuf::from(url))
    });
    if let Some(src) = local {
        fs::copy(&src, dest).map_err(|e| Failure::new("E_FETCH", format!("{}: {e}", src.display())))?;
        return Ok(());
    }
    let mut resp = reqwest::blocking::get(url)
        .map_err(|e| Failure::new("E_NETWORK", format!("{url}: {e}")))?;
    if !resp.status().is_success() {
        return Err(Failure::new("E_NETWORK", format!("{url}: HTTP {}", resp.status())));
    }
    let mut out = fs::File::create(dest).map_err(|e| Failure::io(dest, e))?;
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = resp
            .read(&mut buf)
            .map_err(|e| Failure::new("E_NETWORK", format!("{url}: {e}")))?;
        if n == 0 {
            break;
        }
        out.write_all(&buf[..n]).map_err(|e| Failure::io(dest, e))?;
    }
    Ok(())
}

/// Ensure `dest` holds the file. A present file whose digest matches its
/// sidecar (and `expected`, if given) is reused; otherwise it is fetched
/// from `url`, verified, and the sidecar is written.
pub fn fetch(url: Option<&str>, dest: &Path, expected: Option<&str>) -> Outcome<(FetchStatus, String)> {
    let expected = expected.map(str::to_ascii_lowercase);
    if dest.exists() {
        let digest = sha256_file(dest)?;
        let recorded = read_sidecar(dest);
        let sidecar_ok = recorded.as_deref().is_none_or(|r| r == digest);
        let expected_ok = expected.as_deref().is_none_or(|e| e == digest);
        if sidecar_ok && expected_ok {
            if recorded.is_none() {
                write_sidecar(dest, &digest)?;
            }
            return Ok((FetchStatus::Cached, digest));
        }
        if url.is_none() {
            let want = expected.or(recorded).unwrap_or_default();
            return Err(Failure::new(
                "E_CHECKSUM",
                format!(
                    "cached {} has sha256 {digest}, expected {want}; pass --url to re-download",
                    dest.display()
                ),
            ));
        }
    }
    let Some(url) = url else {
        return Err(Failure::new(
            "E_FETCH",
            format!(
                "no cached copy at {} and no --url given; pass --url <location> or place the file there",
                dest.display()
            ),
        ));
    };
    if let Some(parent) = dest.parent() {
        fs::create_dir_all(parent).map_err(|e| Failure::io(parent, e))?;
    }
    let partial = dest.with_extension("part");
    let result = download(url, &partial);
    if let Err(e) = result {
        let _ = fs::remove_file(&partial);
        return Err(e);
    }
    let digest = sha256_file(&partial)?;
    if let Some(want) = expected.as_deref() {
        if want != digest {
            let _ = fs::remove_file(&partial);
            return Err(Failure::new(
                "E_CHECKSUM",
                format!("{url}: downloaded sha256 {digest}, expected {want}"),
            ));
        }
    }
    fs::rename(&partial, dest).map_err(|e| Failure::io(dest, e))?;
    write_sidecar(dest, &digest)?;
    Ok((FetchStatus::Downloaded, digest))
}
