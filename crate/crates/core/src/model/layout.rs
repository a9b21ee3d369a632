use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    X,
    Y,
}

/// Where a row splits into its two language segments.
///
/// Positions `[0, boundary)` form segment X and `[boundary, total_length)`
/// segment Y. A monolingual row has `boundary == total_length`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentLayout {
    pub total_length: usize,
    pub boundary: usize,
    pub language_x: usize,
    pub language_y: usize,
    /// `[BOS]`/`[SEP]`/`[EOS]` positions.
    pub special: Vec<bool>,
    /// Padding positions; never visible as keys.
    pub padding: Vec<bool>,
}

impl SegmentLayout {
    pub fn mono(total_length: usize, language: usize, special: Vec<bool>) -> Result<Self> {
        let padding = vec![false; total_length];
        Self::new(total_length, total_length, language, language, special, padding)
    }

    pub fn bilingual(
        total_length: usize,
        boundary: usize,
        language_x: usize,
        language_y: usize,
        special: Vec<bool>,
    ) -> Result<Self> {
        if boundary == 0 || boundary >= total_length {
            return Err(Error::Layout(format!(
                "bilingual boundary {boundary} leaves an empty segment in a row of {total_length}"
            )));
        }
        let padding = vec![false; total_length];
        Self::new(total_length, boundary, language_x, language_y, special, padding)
    }

    pub fn new(
        total_length: usize,
        boundary: usize,
        language_x: usize,
        language_y: usize,
        special: Vec<bool>,
        padding: Vec<bool>,
    ) -> Result<Self> {
        if total_length == 0 {
            return Err(Error::Layout("empty row".into()));
        }
        if boundary == 0 || boundary > total_length {
            return Err(Error::Layout(format!(
                "boundary {boundary} outside (0, {total_length}]"
            )));
        }
        if special.len() != total_length || padding.len() != total_length {
            return Err(Error::Layout(format!(
                "special/padding flags ({}, {}) do not cover {total_length} positions",
                special.len(),
                padding.len()
            )));
        }
        let layout = Self {
            total_length,
            boundary,
            language_x,
            language_y,
            special,
            padding,
        };
        for seg in layout.segments() {
            if !layout.positions(seg).any(|p| !layout.padding[p]) {
                return Err(Error::Layout(format!("segment {seg:?} has only padding")));
            }
        }
        Ok(layout)
    }

    pub fn is_bilingual(&self) -> bool {
        self.boundary < self.total_length
    }

    pub fn segments(&self) -> Vec<Segment> {
        if self.is_bilingual() {
            vec![Segment::X, Segment::Y]
        } else {
            vec![Segment::X]
        }
    }

    pub fn segment_of(&self, pos: usize) -> Segment {
        if pos < self.boundary {
            Segment::X
        } else {
            Segment::Y
        }
    }

    pub fn language_of(&self, pos: usize) -> usize {
        match self.segment_of(pos) {
            Segment::X => self.language_x,
            Segment::Y => self.language_y,
        }
    }

    pub fn positions(&self, seg: Segment) -> std::ops::Range<usize> {
        match seg {
            Segment::X => 0..self.boundary,
            Segment::Y => self.boundary..self.total_length,
        }
    }

    /// Non-special, non-padding positions.
    pub fn is_content(&self, pos: usize) -> bool {
        !self.special[pos] && !self.padding[pos]
    }

    fn build(&self, allow: impl Fn(usize, usize) -> bool) -> Vec<bool> {
        let n = self.total_length;
        let mut m = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                // padding queries keep their own column so no row is empty
                let visible = !self.padding[j] || (self.padding[i] && i == j);
                m[i * n + j] = visible && allow(i, j);
            }
        }
        m
    }

    /// Every real token sees every real token.
    pub fn mixed_mask(&self) -> Vec<bool> {
        self.build(|_, _| true)
    }

    /// Queries see only their own segment.
    pub fn intra_mask(&self) -> Vec<bool> {
        self.build(|i, j| self.segment_of(i) == self.segment_of(j))
    }

    /// Queries see only the other segment.
    pub fn cross_mask(&self) -> Result<Vec<bool>> {
        if !self.is_bilingual() {
            return Err(Error::Layout(
                "cross-lingual attention needs two non-empty segments".into(),
            ));
        }
        let n = self.total_length;
        let mut m = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                m[i * n + j] = !self.padding[j] && self.segment_of(i) != self.segment_of(j);
            }
        }
        Ok(m)
    }
}
