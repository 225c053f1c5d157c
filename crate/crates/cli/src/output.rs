//! Result files. Floats in CSV use 17 significant digits; JSON uses the
//! shortest representation that round-trips.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use bishadow::engine::ShadowingResult;
use bishadow::hyperbolicity::{Certificate, ShadowingConstants, TildeConstants};
use serde::Serialize;

use crate::{exit, Failure};

fn io_failure(e: anyhow::Error) -> Failure {
    Failure::new(exit::IO, format!("{e:#}"))
}

pub(crate) fn write_text(path: &Path, text: &str, files: &mut Vec<PathBuf>) -> Result<(), Failure> {
    let write = || -> anyhow::Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    };
    write().map_err(io_failure)?;
    files.push(path.to_path_buf());
    Ok(())
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T, files: &mut Vec<PathBuf>) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::new(exit::IO, e.to_string()))?;
    text.push('\n');
    write_text(path, &text, files)
}

#[derive(Serialize)]
struct CertificateFile<'a> {
    certificate: &'a Certificate,
    tilde: Option<&'a TildeConstants>,
    constants: Option<&'a ShadowingConstants>,
}

pub(crate) fn write_certificate(
    out: &Path,
    cert: &Certificate,
    tilde: Option<&TildeConstants>,
    constants: Option<&ShadowingConstants>,
    files: &mut Vec<PathBuf>,
) -> Result<(), Failure> {
    write_text(&out.join("certificate.txt"), &cert.report(tilde, constants), files)?;
    let file = CertificateFile {
        certificate: cert,
        tilde,
        constants,
    };
    write_json(&out.join("certificate.json"), &file, files)
}

pub(crate) fn write_result(out: &Path, result: &ShadowingResult, files: &mut Vec<PathBuf>) -> Result<(), Failure> {
    write_json(&out.join("result.json"), result, files)?;
    write_text(&out.join("orbit.csv"), &orbit_csv(result), files)
}

/// `i, x..., y..., dist, delta` per point; `delta` is the defect of the
/// step leaving the point, empty at the last one.
pub fn orbit_csv(result: &ShadowingResult) -> String {
    let d = result.base.first().map_or(0, |p| p.dim());
    let mut s = String::from("i");
    for r in 0..d {
        let _ = write!(s, ",x{r}");
    }
    for r in 0..d {
        let _ = write!(s, ",y{r}");
    }
    s.push_str(",dist,delta\n");
    for (p, (x, y)) in result.base.iter().zip(&result.orbit).enumerate() {
        let _ = write!(s, "{}", result.point_index(p));
        for v in x.as_slice().iter().chain(y.as_slice()) {
            let _ = write!(s, ",{v:.16e}");
        }
        let _ = write!(s, ",{:.16e},", result.distances[p]);
        if let Some(delta) = result.defects.get(p) {
            let _ = write!(s, "{delta:.16e}");
        }
        s.push('\n');
    }
    s
}
