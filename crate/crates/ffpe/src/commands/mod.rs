pub mod eval;
pub mod slide;
pub mod survey;
pub mod train;

use std::path::Path;

use anyhow::Context;
use serde::Serialize;

/// Print `value` as JSON on stdout and, if asked, write it to `report`.
pub fn emit<T: Serialize>(value: &T, report: Option<&Path>) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    if let Some(path) = report {
        ffpe::io::write_json(path, value).with_context(|| format!("writing report {}", path.display()))?;
    }
    Ok(())
}

pub fn require_file(path: &Path) -> anyhow::Result<()> {
    anyhow::ensure!(path.is_file(), "{}: no such file", path.display());
    Ok(())
}

pub fn require_dir(path: &Path) -> anyhow::Result<()> {
    anyhow::ensure!(path.is_dir(), "{}: no such directory", path.display());
    Ok(())
}

pub fn parse_rgb(s: &str) -> Result<[u8; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    let [r, g, b] = parts.as_slice() else {
        return Err(format!("expected R,G,B, got `{s}`"));
    };
    let p = |v: &str| v.trim().parse::<u8>().map_err(|e| format!("`{v}`: {e}"));
    Ok([p(r)?, p(g)?, p(b)?])
}
