//! File and table output helpers.

use std::io::Write;
use std::path::Path;

use dmae::pipeline::ExperimentReport;

/// Write-temp-then-rename so concurrent readers never observe a partial
/// file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = match dir {
        Some(d) => tempfile_in(d)?,
        None => tempfile_in(Path::new("."))?,
    };
    tmp.1.write_all(bytes)?;
    tmp.1.sync_all()?;
    drop(tmp.1);
    std::fs::rename(&tmp.0, path)
}

fn tempfile_in(dir: &Path) -> std::io::Result<(std::path::PathBuf, std::fs::File)> {
    for attempt in 0..1000 {
        let candidate = dir.join(format!(
            ".tmp-{}-{attempt}",
            std::process::id()
        ));
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&candidate)
        {
            Ok(f) => return Ok((candidate, f)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e),
        }
    }
    Err(std::io::Error::other("could not create a temporary file"))
}

fn fmt_pair(mean: Option<f64>, std: Option<f64>) -> String {
    match mean {
        Some(m) => format!("{:.3} \u{00b1} {:.3}", m, std.unwrap_or(0.0)),
        None => "-".into(),
    }
}

/// Markdown table with one row per report: ACC first, then NMI.
pub fn render_table(reports: &[ExperimentReport]) -> String {
    let mut rows: Vec<[String; 3]> = vec![[
        "experiment".to_string(),
        "ACC".to_string(),
        "NMI".to_string(),
    ]];
    for r in reports {
        rows.push([
            r.name.clone(),
            fmt_pair(r.mean_acc, r.std_acc),
            fmt_pair(r.mean_nmi, r.std_nmi),
        ]);
    }
    let widths: Vec<usize> = (0..3)
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap())
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        out.push('|');
        for (c, cell) in row.iter().enumerate() {
            out.push_str(&format!(" {:<width$} |", cell, width = widths[c]));
        }
        out.push('\n');
        if i == 0 {
            out.push('|');
            for width in &widths {
                out.push_str(&format!("{:-<w$}|", "", w = width + 2));
            }
            out.push('\n');
        }
    }
    out
}
