use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::SIMPLEX_TOL;
use crate::error::{Error, Result};

/// `T × C × H × W` softmax samples, row-major in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbStack {
    pub members: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
    pub class_names: Vec<String>,
    pub source_tag: String,
}

/// Sidecar JSON describing a `_probs.bin` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackHeader {
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    pub class_names: Vec<String>,
    pub source_tag: String,
}

/// Mean probability map, `C × H × W` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ProbMap {
    /// Copies the class vector of flat pixel `i` into `buf`.
    pub fn pixel_into(&self, i: usize, buf: &mut [f64]) {
        let hw = self.height * self.width;
        for (k, b) in buf.iter_mut().enumerate() {
            *b = self.data[k * hw + i];
        }
    }
}

impl ProbStack {
    /// Checks shape only; call [`ProbStack::validate`] for the simplex check.
    pub fn new(
        members: usize,
        classes: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
        class_names: Vec<String>,
        source_tag: impl Into<String>,
    ) -> Result<Self> {
        if members == 0 || classes == 0 || height == 0 || width == 0 {
            return Err(Error::Dimensions(format!(
                "stack dimensions must be positive, got {members}x{classes}x{height}x{width}"
            )));
        }
        if data.len() != members * classes * height * width {
            return Err(Error::Dimensions(format!(
                "{} values for a {members}x{classes}x{height}x{width} stack",
                data.len()
            )));
        }
        if class_names.len() != classes {
            return Err(Error::Dimensions(format!(
                "{} class names for {classes} classes",
                class_names.len()
            )));
        }
        Ok(ProbStack {
            members,
            classes,
            height,
            width,
            data,
            class_names,
            source_tag: source_tag.into(),
        })
    }

    /// Value of member `t`, class `c`, flat pixel `i`.
    #[inline]
    pub fn at(&self, t: usize, c: usize, i: usize) -> f32 {
        self.data[(t * self.classes + c) * self.height * self.width + i]
    }

    pub fn header(&self) -> StackHeader {
        StackHeader {
            t: self.members,
            c: self.classes,
            h: self.height,
            w: self.width,
            class_names: self.class_names.clone(),
            source_tag: self.source_tag.clone(),
        }
    }

    /// Every member vector must be non-negative, finite and sum to one.
    /// The first offending `(t, h, w)` is reported.
    pub fn validate(&self) -> Result<()> {
        let hw = self.height * self.width;
        for t in 0..self.members {
            for i in 0..hw {
                let mut sum = 0.0f64;
                for c in 0..self.classes {
                    let v = self.at(t, c, i);
                    if !v.is_finite() || v < 0.0 {
                        return Err(self.simplex_err(t, i, format!("class {c} has value {v}")));
                    }
                    sum += f64::from(v);
                }
                if (sum - 1.0).abs() > SIMPLEX_TOL {
                    return Err(self.simplex_err(t, i, format!("sum is {sum}")));
                }
            }
        }
        Ok(())
    }

    fn simplex_err(&self, t: usize, i: usize, reason: String) -> Error {
        Error::Simplex {
            t,
            h: i / self.width,
            w: i % self.width,
            reason,
        }
    }

    /// Mean over members without validation.
    pub(crate) fn mean(&self) -> ProbMap {
        let n = self.classes * self.height * self.width;
        let mut data = vec![0.0f64; n];
        for member in self.data.chunks_exact(n) {
            for (d, &v) in data.iter_mut().zip(member) {
                *d += f64::from(v);
            }
        }
        let inv = 1.0 / self.members as f64;
        data.iter_mut().for_each(|d| *d *= inv);
        ProbMap {
            classes: self.classes,
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
        (dir.join(format!("{stem}_probs.bin")), dir.join(format!("{stem}_probs.json")))
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let (bin, json) = Self::paths(dir, stem);
        let bytes: Vec<u8> = self.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
        let mut text = serde_json::to_string_pretty(&self.header()).expect("header serializes");
        text.push('\n');
        std::fs::write(&json, text).map_err(|e| Error::io(&json, e))
    }

    /// Reads a stack and validates it; errors name the offending file.
    pub fn read(dir: &Path, stem: &str) -> Result<Self> {
        let (bin, json) = Self::paths(dir, stem);
        let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let h: StackHeader = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: json.clone(),
            source,
        })?;
        let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::in_file(&bin, Error::Dimensions(format!("{} bytes is not a float array", bytes.len()))));
        }
        let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let stack = ProbStack::new(h.t, h.c, h.h, h.w, data, h.class_names, h.source_tag)
            .map_err(|e| Error::in_file(&bin, e))?;
        stack.validate().map_err(|e| Error::in_file(&bin, e))?;
        Ok(stack)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_by_one() -> ProbStack {
        ProbStack::new(2, 2, 1, 1, vec![0.25, 0.75, 1.0, 0.0], vec!["bg".into(), "fg".into()], "mock").unwrap()
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = two_by_one();
        s.write(dir.path(), "img_0000").unwrap();
        assert_eq!(ProbStack::read(dir.path(), "img_0000").unwrap(), s);
        let bin = std::fs::read(dir.path().join("img_0000_probs.bin")).unwrap();
        // Little-endian f32 in T, C, H, W order.
        assert_eq!(&bin[..4], &0.25f32.to_le_bytes());
        assert_eq!(&bin[12..], &0.0f32.to_le_bytes());
        let json: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("img_0000_probs.json")).unwrap()).unwrap();
        assert_eq!(json["T"], 2);
        assert_eq!(json["C"], 2);
        assert_eq!(json["source_tag"], "mock");
    }

    #[test]
    fn bad_files_are_rejected_with_their_path() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = two_by_one();
        s.data[1] = 0.8;
        s.write(dir.path(), "x").unwrap();
        let err = ProbStack::read(dir.path(), "x").unwrap_err();
        assert!(err.to_string().contains("x_probs.bin"), "{err}");
        assert!(matches!(err, Error::InFile { ref source, .. } if matches!(**source, Error::Simplex { t: 0, .. })));

        std::fs::write(dir.path().join("x_probs.bin"), [0u8; 12]).unwrap();
        assert!(ProbStack::read(dir.path(), "x").is_err());
    }

    #[test]
    fn shape_mismatches() {
        assert!(ProbStack::new(1, 2, 1, 1, vec![1.0], vec!["a".into(), "b".into()], "").is_err());
        assert!(ProbStack::new(0, 2, 1, 1, vec![], vec!["a".into(), "b".into()], "").is_err());
        assert!(ProbStack::new(1, 2, 1, 1, vec![1.0, 0.0], vec!["a".into()], "").is_err());
    }

    #[test]
    fn negative_and_nan_entries_fail() {
        let mut s = two_by_one();
        s.data = vec![1.2, -0.2, 1.0, 0.0];
        assert!(s.validate().is_err());
        s.data = vec![f32::NAN, 1.0, 1.0, 0.0];
        assert!(s.validate().is_err());
    }
}
