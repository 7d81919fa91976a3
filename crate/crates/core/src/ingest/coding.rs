use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::IngestError;

pub type LabelCode = u16;

/// Integer codes used in ground-truth label maps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCoding {
    pub background_code: LabelCode,
    pub overlap_code: LabelCode,
    /// Autosomes 1–22, X, Y, in class-index order.
    pub chromosome_codes: Vec<LabelCode>,
    pub code_names: BTreeMap<LabelCode, String>,
}

impl Default for LabelCoding {
    /// Background 0, chromosomes 1–22, X = 23, Y = 24, overlap 255.
    fn default() -> Self {
        let chromosome_codes: Vec<LabelCode> = (1..=24).collect();
        let mut code_names = BTreeMap::new();
        code_names.insert(0, "background".to_string());
        code_names.insert(255, "overlap".to_string());
        for &c in &chromosome_codes {
            let name = match c {
                23 => "X".to_string(),
                24 => "Y".to_string(),
                n => n.to_string(),
            };
            code_names.insert(c, name);
        }
        Self {
            background_code: 0,
            overlap_code: 255,
            chromosome_codes,
            code_names,
        }
    }
}

impl LabelCoding {
    pub const NUM_CLASSES: usize = 24;

    pub fn validate(&self) -> Result<(), IngestError> {
        let distinct: BTreeSet<_> = self.chromosome_codes.iter().collect();
        if self.chromosome_codes.len() != Self::NUM_CLASSES || distinct.len() != Self::NUM_CLASSES {
            return Err(IngestError::InvalidCoding(format!(
                "expected {} distinct chromosome codes, got {:?}",
                Self::NUM_CLASSES,
                self.chromosome_codes
            )));
        }
        if self.background_code == self.overlap_code {
            return Err(IngestError::InvalidCoding("background and overlap codes coincide".into()));
        }
        if distinct.contains(&self.background_code) || distinct.contains(&self.overlap_code) {
            return Err(IngestError::InvalidCoding(
                "background/overlap codes collide with a chromosome code".into(),
            ));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.chromosome_codes.len()
    }

    /// Class index (position in `chromosome_codes`) of a chromosome code.
    pub fn class_index(&self, code: LabelCode) -> Option<usize> {
        self.chromosome_codes.iter().position(|&c| c == code)
    }

    pub fn is_chromosome(&self, code: LabelCode) -> bool {
        self.class_index(code).is_some()
    }

    pub fn is_declared(&self, code: LabelCode) -> bool {
        code == self.background_code || code == self.overlap_code || self.is_chromosome(code)
    }

    pub fn name(&self, code: LabelCode) -> String {
        self.code_names.get(&code).cloned().unwrap_or_else(|| code.to_string())
    }

    /// Dense code → class-index table for per-pixel lookups.
    pub fn class_lookup(&self) -> Vec<Option<u8>> {
        let max = self.chromosome_codes.iter().copied().max().unwrap_or(0) as usize;
        let mut table = vec![None; max + 1];
        for (i, &c) in self.chromosome_codes.iter().enumerate() {
            table[c as usize] = Some(i as u8);
        }
        table
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_coding_is_valid() {
        let c = LabelCoding::default();
        c.validate().unwrap();
        assert_eq!(c.class_index(1), Some(0));
        assert_eq!(c.class_index(24), Some(23));
        assert_eq!(c.name(23), "X");
        assert!(!c.is_chromosome(0) && !c.is_chromosome(255));
        assert!(c.is_declared(255) && !c.is_declared(99));
    }

    #[test]
    fn colliding_codes_are_rejected() {
        let mut c = LabelCoding::default();
        c.overlap_code = 5;
        assert!(c.validate().is_err());
        let mut c = LabelCoding::default();
        c.chromosome_codes[3] = 1;
        assert!(c.validate().is_err());
        let mut c = LabelCoding::default();
        c.chromosome_codes.pop();
        assert!(c.validate().is_err());
    }

    #[test]
    fn lookup_table_agrees_with_class_index() {
        let c = LabelCoding::default();
        let t = c.class_lookup();
        for code in 0..t.len() as u16 {
            assert_eq!(t[code as usize].map(usize::from), c.class_index(code));
        }
    }
}
