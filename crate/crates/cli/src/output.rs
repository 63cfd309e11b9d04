use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};

use crate::Global;

/// `# chip <version> seed=<seed> [timestamp=<unix seconds>]`
pub fn provenance(global: &Global) -> String {
    let mut line = format!("# chip {} seed={}", env!("CARGO_PKG_VERSION"), global.seed);
    if !global.no_timestamp {
        let secs = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        line.push_str(&format!(" timestamp={secs}"));
    }
    line
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

/// Opens `dir/name` for a CSV, writing the provenance line first.
pub fn csv_file(global: &Global, dir: &Path, name: &str) -> Result<(PathBuf, BufWriter<File>)> {
    ensure_dir(dir)?;
    let path = dir.join(name);
    let file = File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{}", provenance(global))?;
    Ok((path, w))
}
