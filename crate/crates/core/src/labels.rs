use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("label map of {h}x{w} needs {} labels, got {got}", h * w)]
pub struct LabelShapeError {
    pub h: usize,
    pub w: usize,
    pub got: usize,
}

/// Per-pixel integer class ids on an `H x W` grid; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    h: usize,
    w: usize,
    labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, labels: Vec<u16>) -> Result<Self, LabelShapeError> {
        if h * w != labels.len() || h == 0 || w == 0 {
            return Err(LabelShapeError { h, w, got: labels.len() });
        }
        Ok(LabelMap { h, w, labels })
    }

    pub fn filled(h: usize, w: usize, label: u16) -> Self {
        LabelMap { h, w, labels: vec![label; h * w] }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u16 {
        self.labels[y * self.w + x]
    }

    pub fn max_label(&self) -> u16 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    pub fn count(&self, label: u16) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn as_indices(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    /// Binary mask of pixels equal to `label`.
    pub fn mask(&self, label: u16) -> LabelMap {
        self.map(|l| u16::from(l == label))
    }

    pub fn map(&self, f: impl Fn(u16) -> u16) -> LabelMap {
        LabelMap { h: self.h, w: self.w, labels: self.labels.iter().map(|&l| f(l)).collect() }
    }
}
