//! Heatmap export: a labelled CSV, a binary PGM on a fixed `[0, 0.15]`
//! gray scale, and a sidecar listing gold alignments.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{AttentionRecord, Segment};

/// Probabilities at or above this value map to full white.
pub const HEATMAP_SCALE: f64 = 0.15;

pub fn pgm_pixel(p: f64) -> u8 {
    (255.0 * p.clamp(0.0, HEATMAP_SCALE) / HEATMAP_SCALE).round() as u8
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapFiles {
    pub csv: PathBuf,
    pub pgm: PathBuf,
    pub gold: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapCsv {
    /// `(token label, segment marker)` per row and per column.
    pub rows: Vec<(String, String)>,
    pub cols: Vec<(String, String)>,
    pub probs: Vec<f64>,
}

impl HeatmapCsv {
    pub fn row_sum(&self, i: usize) -> f64 {
        let n = self.cols.len();
        self.probs[i * n..(i + 1) * n].iter().sum()
    }
}

fn marker(record: &AttentionRecord, p: usize) -> &'static str {
    let l = &record.layout;
    if l.padding[p] {
        "PAD"
    } else {
        match l.segment_of(p) {
            Segment::X => "X",
            Segment::Y => "Y",
        }
    }
}

/// Writes `<stem>.csv`, `<stem>.pgm` and `<stem>.gold.txt` under `dir`.
/// `head` selects one head; `None` averages them. `labels` names each
/// position of the row.
pub fn export_heatmap(
    record: &AttentionRecord,
    head: Option<usize>,
    labels: &[String],
    gold: &[(usize, usize)],
    dir: &Path,
    stem: &str,
) -> Result<HeatmapFiles> {
    if record.is_empty() || record.heads.is_empty() {
        return Err(Error::Data("empty attention record".into()));
    }
    let n = record.len();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} positions", labels.len())));
    }
    if labels.iter().any(|l| l.contains([',', '\n', '|'])) {
        return Err(Error::Data("token labels may not contain `,`, `|` or newlines".into()));
    }
    let probs = match head {
        None => record.head_mean(),
        Some(h) => record
            .heads
            .get(h)
            .ok_or_else(|| Error::Index(format!("head {h} of {}", record.heads.len())))?
            .clone(),
    };
    fs::create_dir_all(dir)?;
    let files = HeatmapFiles {
        csv: dir.join(format!("{stem}.csv")),
        pgm: dir.join(format!("{stem}.pgm")),
        gold: dir.join(format!("{stem}.gold.txt")),
    };

    let mut csv = String::from("token,segment");
    for (j, l) in labels.iter().enumerate() {
        csv.push_str(&format!(",{l}|{}", marker(record, j)));
    }
    csv.push('\n');
    for (i, l) in labels.iter().enumerate() {
        csv.push_str(&format!("{l},{}", marker(record, i)));
        for p in &probs[i * n..(i + 1) * n] {
            csv.push_str(&format!(",{p}"));
        }
        csv.push('\n');
    }
    fs::write(&files.csv, csv)?;

    let mut pgm = format!("P5\n{n} {n}\n255\n").into_bytes();
    pgm.extend(probs.iter().map(|&p| pgm_pixel(p)));
    fs::write(&files.pgm, pgm)?;

    let mut g = fs::File::create(&files.gold)?;
    writeln!(g, "# layer={} tag={} x_pos y_pos x_token y_token", record.layer, record.tag.name())?;
    for &(x, y) in gold {
        let lab = |p: usize| labels.get(p).map_or("?", String::as_str);
        writeln!(g, "{x} {y} {} {}", lab(x), lab(y))?;
    }
    Ok(files)
}

pub fn read_heatmap_csv(path: &Path) -> Result<HeatmapCsv> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let bad = |what: &str| Error::Format(format!("{}: {what}", path.display()));
    let header = lines.next().ok_or_else(|| bad("empty file"))?;
    let cols = header
        .split(',')
        .skip(2)
        .map(|c| {
            c.rsplit_once('|')
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .ok_or_else(|| bad("column label lacks a segment marker"))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut probs = Vec::with_capacity(cols.len() * cols.len());
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != cols.len() + 2 {
            return Err(bad("ragged row"));
        }
        rows.push((f[0].to_string(), f[1].to_string()));
        for v in &f[2..] {
            probs.push(v.parse().map_err(|_| bad("non-numeric probability"))?);
        }
    }
    Ok(HeatmapCsv { rows, cols, probs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AttentionTag, SegmentLayout};

    fn record() -> AttentionRecord {
        let l = SegmentLayout::bilingual(4, 2, 0, 2, vec![true, false, false, true]).unwrap();
        let h0 = vec![0.1, 0.2, 0.3, 0.4, 0.25, 0.25, 0.25, 0.25, 1.0, 0.0, 0.0, 0.0, 0.05, 0.15, 0.3, 0.5];
        let h1 = vec![0.25; 16];
        AttentionRecord {
            layer: 1,
            tag: AttentionTag::Ma,
            row: 0,
            heads: vec![h0, h1],
            layout: l,
        }
    }

    fn labels() -> Vec<String> {
        ["[BOS]", "A_3", "C_7", "[EOS]"].iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn pixel_scale() {
        assert_eq!(pgm_pixel(0.0), 0);
        assert_eq!(pgm_pixel(0.075), 128);
        assert_eq!(pgm_pixel(0.15), 255);
        assert_eq!(pgm_pixel(0.9), 255);
        assert_eq!(pgm_pixel(0.01), 17);
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = record();
        let files = export_heatmap(&r, None, &labels(), &[(1, 2)], dir.path(), "ma_l1").unwrap();
        let back = read_heatmap_csv(&files.csv).unwrap();
        let mean = r.head_mean();
        assert_eq!(back.probs.len(), mean.len());
        for (a, b) in back.probs.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-6);
        }
        for i in 0..4 {
            assert!((back.row_sum(i) - 1.0).abs() < 1e-5);
        }
        assert_eq!(back.cols[2], ("C_7".to_string(), "Y".to_string()));
        assert_eq!(back.rows[0].1, "X");

        let pgm = fs::read(&files.pgm).unwrap();
        let header = b"P5\n4 4\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        let pixels = &pgm[header.len()..];
        assert_eq!(pixels.len(), 16);
        for (px, p) in pixels.iter().zip(&mean) {
            assert_eq!(*px, (255.0 * p.min(0.15) / 0.15).round() as u8);
        }
        let gold = fs::read_to_string(&files.gold).unwrap();
        assert!(gold.lines().nth(1).unwrap().starts_with("1 2 A_3 C_7"));

        let one = export_heatmap(&r, Some(0), &labels(), &[], dir.path(), "h0").unwrap();
        assert_eq!(read_heatmap_csv(&one.csv).unwrap().probs, r.heads[0]);
    }

    #[test]
    fn empty_record_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = record();
        r.heads.clear();
        assert!(export_heatmap(&r, None, &labels(), &[], dir.path(), "x").is_err());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        let err = export_heatmap(&record(), None, &labels(), &[], &blocker.join("sub"), "x").unwrap_err();
        assert!(matches!(err, Error::Io(_)));
    }
}
