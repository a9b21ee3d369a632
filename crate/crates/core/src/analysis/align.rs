use crate::error::{Error, Result};
use crate::model::{AttentionRecord, AttentionTag, Segment, SegmentLayout};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DirectionScore {
    pub hits: usize,
    pub rows: usize,
    /// Rows whose maximum was shared by several columns.
    pub ties: usize,
}

impl DirectionScore {
    pub fn accuracy(&self) -> f64 {
        if self.rows == 0 {
            0.0
        } else {
            self.hits as f64 / self.rows as f64
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AlignmentScore {
    pub accuracy: f64,
    pub hits: usize,
    pub ties: usize,
    pub num_rows_evaluated: usize,
    pub x_to_y: DirectionScore,
    pub y_to_x: DirectionScore,
    /// Sum over evaluated rows of `1 / n`, `n` the number of candidate
    /// columns; divided by the row count it is the uniform-guess accuracy.
    pub uniform_hits: f64,
}

impl AlignmentScore {
    pub fn uniform_baseline(&self) -> f64 {
        if self.num_rows_evaluated == 0 {
            0.0
        } else {
            self.uniform_hits / self.num_rows_evaluated as f64
        }
    }

    /// Pools the rows of `other` into `self`.
    pub fn merge(&mut self, other: &AlignmentScore) {
        for (a, b) in [(&mut self.x_to_y, other.x_to_y), (&mut self.y_to_x, other.y_to_x)] {
            a.hits += b.hits;
            a.rows += b.rows;
            a.ties += b.ties;
        }
        self.hits += other.hits;
        self.ties += other.ties;
        self.num_rows_evaluated += other.num_rows_evaluated;
        self.uniform_hits += other.uniform_hits;
        self.accuracy = if self.num_rows_evaluated == 0 {
            0.0
        } else {
            self.hits as f64 / self.num_rows_evaluated as f64
        };
    }
}

fn other(seg: Segment) -> Segment {
    match seg {
        Segment::X => Segment::Y,
        Segment::Y => Segment::X,
    }
}

/// Content columns of the segment opposite to `row`.
fn candidates(layout: &SegmentLayout, row: usize) -> Vec<usize> {
    layout
        .positions(other(layout.segment_of(row)))
        .filter(|&j| layout.is_content(j))
        .collect()
}

/// Argmax over `cols` of `row_probs` renormalized over `cols`; the lowest
/// index wins ties. Returns `(column, tied)`.
fn argmax(row_probs: &[f64], cols: &[usize]) -> (usize, bool) {
    let total: f64 = cols.iter().map(|&j| row_probs[j]).sum();
    let p = |j: usize| if total > 0.0 { row_probs[j] / total } else { 0.0 };
    let mut best = cols[0];
    let mut tied = false;
    for &j in &cols[1..] {
        if p(j) > p(best) {
            best = j;
            tied = false;
        } else if p(j) == p(best) {
            tied = true;
        }
    }
    (best, tied)
}

/// Scores the head-averaged attention of a CA or MA record against gold
/// `(x position, y position)` pairs in row coordinates. Each gold pair
/// yields an X→Y query row and a Y→X query row.
pub fn alignment_accuracy(record: &AttentionRecord, gold: &[(usize, usize)]) -> Result<AlignmentScore> {
    if record.tag == AttentionTag::Ia {
        return Err(Error::Data("intra-lingual records carry no cross-lingual attention".into()));
    }
    if record.heads.is_empty() || record.is_empty() {
        return Err(Error::Data("empty attention record".into()));
    }
    alignment_from_matrix(&record.head_mean(), &record.layout, gold)
}

/// As [`alignment_accuracy`] over an explicit `n × n` probability matrix.
pub fn alignment_from_matrix(probs: &[f64], layout: &SegmentLayout, gold: &[(usize, usize)]) -> Result<AlignmentScore> {
    let n = layout.total_length;
    if probs.len() != n * n {
        return Err(Error::Shape(format!("{} probabilities for a {n}×{n} record", probs.len())));
    }
    if !layout.is_bilingual() {
        return Err(Error::Data("alignment needs a bilingual layout".into()));
    }
    let mut s = AlignmentScore::default();
    for &(x, y) in gold {
        let ok = |p: usize, seg: Segment| p < n && layout.segment_of(p) == seg && layout.is_content(p);
        if !ok(x, Segment::X) || !ok(y, Segment::Y) {
            return Err(Error::Data(format!("gold pair ({x}, {y}) outside the segments' content")));
        }
        for (row, target, dir) in [(x, y, &mut s.x_to_y), (y, x, &mut s.y_to_x)] {
            let cols = candidates(layout, row);
            let (best, tied) = argmax(&probs[row * n..(row + 1) * n], &cols);
            dir.rows += 1;
            if best == target {
                dir.hits += 1;
            }
            if tied {
                dir.ties += 1;
            }
            s.uniform_hits += 1.0 / cols.len() as f64;
        }
    }
    s.hits = s.x_to_y.hits + s.y_to_x.hits;
    s.ties = s.x_to_y.ties + s.y_to_x.ties;
    s.num_rows_evaluated = s.x_to_y.rows + s.y_to_x.rows;
    s.accuracy = if s.num_rows_evaluated == 0 {
        0.0
    } else {
        s.hits as f64 / s.num_rows_evaluated as f64
    };
    Ok(s)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RowMass {
    pub head: usize,
    pub position: usize,
    pub intra: f64,
    pub cross: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MassBalance {
    pub layer: usize,
    pub rows: Vec<RowMass>,
    /// `(intra, cross)` averaged over rows, per head.
    pub per_head: Vec<(f64, f64)>,
    pub mean_intra: f64,
    pub mean_cross: f64,
}

/// Splits every content query row's mass over content columns at the
/// segment boundary, after renormalizing over those columns. Only MA
/// records qualify.
pub fn mass_balance(record: &AttentionRecord) -> Result<MassBalance> {
    if record.tag != AttentionTag::Ma {
        return Err(Error::Data(format!(
            "mass balance applies to mixed attention, not {}",
            record.tag.name()
        )));
    }
    let l = &record.layout;
    if !l.is_bilingual() {
        return Err(Error::Data("mass balance needs a bilingual layout".into()));
    }
    let n = l.total_length;
    let content: Vec<usize> = (0..n).filter(|&p| l.is_content(p)).collect();
    let mut rows = Vec::new();
    let mut per_head = Vec::with_capacity(record.heads.len());
    for (h, probs) in record.heads.iter().enumerate() {
        let (mut si, mut sc, mut k) = (0.0, 0.0, 0usize);
        for &i in &content {
            let r = &probs[i * n..(i + 1) * n];
            let total: f64 = content.iter().map(|&j| r[j]).sum();
            if total <= 0.0 {
                continue;
            }
            let own = l.segment_of(i);
            let intra: f64 = content.iter().filter(|&&j| l.segment_of(j) == own).map(|&j| r[j]).sum::<f64>() / total;
            let cross: f64 = content.iter().filter(|&&j| l.segment_of(j) != own).map(|&j| r[j]).sum::<f64>() / total;
            rows.push(RowMass {
                head: h,
                position: i,
                intra,
                cross,
            });
            si += intra;
            sc += cross;
            k += 1;
        }
        let k = k.max(1) as f64;
        per_head.push((si / k, sc / k));
    }
    let k = rows.len().max(1) as f64;
    Ok(MassBalance {
        layer: record.layer,
        mean_intra: rows.iter().map(|r| r.intra).sum::<f64>() / k,
        mean_cross: rows.iter().map(|r| r.cross).sum::<f64>() / k,
        rows,
        per_head,
    })
}
