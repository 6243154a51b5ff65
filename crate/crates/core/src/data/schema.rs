//! Click-log record schema and the categorical level sets of each attribute.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Categorical auxiliary attributes, in the order they appear in the aux vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Gender,
    Age,
    Month,
    Weekday,
    Time,
    Position,
    Cate2,
    Cate3,
    Domcol,
}

impl Attribute {
    pub const ALL: [Attribute; 9] = [
        Attribute::Gender,
        Attribute::Age,
        Attribute::Month,
        Attribute::Weekday,
        Attribute::Time,
        Attribute::Position,
        Attribute::Cate2,
        Attribute::Cate3,
        Attribute::Domcol,
    ];

    /// Attributes carried on every click-log row. `Domcol` is derived from the image.
    pub const LOGGED: [Attribute; 8] = [
        Attribute::Gender,
        Attribute::Age,
        Attribute::Month,
        Attribute::Weekday,
        Attribute::Time,
        Attribute::Position,
        Attribute::Cate2,
        Attribute::Cate3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Gender => "gender",
            Attribute::Age => "age",
            Attribute::Month => "month",
            Attribute::Weekday => "weekday",
            Attribute::Time => "time",
            Attribute::Position => "position",
            Attribute::Cate2 => "cate2",
            Attribute::Cate3 => "cate3",
            Attribute::Domcol => "domcol",
        }
    }

    /// Inclusive code range of the level set.
    pub fn level_range(self) -> (u8, u8) {
        match self {
            Attribute::Gender => (1, 2),
            Attribute::Age => (1, 9),
            Attribute::Month => (1, 12),
            Attribute::Weekday => (1, 7),
            Attribute::Time => (0, 23),
            Attribute::Position => (1, 4),
            Attribute::Cate2 => (1, 4),
            Attribute::Cate3 => (1, 9),
            Attribute::Domcol => (1, 10),
        }
    }

    pub fn levels(self) -> impl Iterator<Item = u8> {
        let (lo, hi) = self.level_range();
        lo..=hi
    }

    pub fn level_count(self) -> usize {
        let (lo, hi) = self.level_range();
        (hi - lo) as usize + 1
    }

    pub fn contains(self, value: i64) -> bool {
        let (lo, hi) = self.level_range();
        value >= lo as i64 && value <= hi as i64
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One ad exposure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickLogRecord {
    pub image_id: String,
    pub gender: u8,
    pub age: u8,
    pub month: u8,
    pub weekday: u8,
    pub time: u8,
    pub position: u8,
    pub cate2: u8,
    pub cate3: u8,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub desc: String,
    #[serde(default)]
    pub ocr: String,
    pub clicked: u8,
}

/// The grouping key of an exposure, minus the image.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AttributeTuple {
    pub gender: u8,
    pub age: u8,
    pub month: u8,
    pub weekday: u8,
    pub time: u8,
    pub position: u8,
    pub cate2: u8,
    pub cate3: u8,
    pub title: String,
    pub desc: String,
    pub ocr: String,
}

impl AttributeTuple {
    /// Value of a logged categorical attribute; `None` for `Domcol`.
    pub fn get(&self, attribute: Attribute) -> Option<u8> {
        Some(match attribute {
            Attribute::Gender => self.gender,
            Attribute::Age => self.age,
            Attribute::Month => self.month,
            Attribute::Weekday => self.weekday,
            Attribute::Time => self.time,
            Attribute::Position => self.position,
            Attribute::Cate2 => self.cate2,
            Attribute::Cate3 => self.cate3,
            Attribute::Domcol => return None,
        })
    }

    pub fn validate(&self) -> std::result::Result<(), (Attribute, i64)> {
        for attr in Attribute::LOGGED {
            let v = self.get(attr).unwrap_or_default() as i64;
            if !attr.contains(v) {
                return Err((attr, v));
            }
        }
        Ok(())
    }
}

impl ClickLogRecord {
    pub fn key(&self) -> AttributeTuple {
        AttributeTuple {
            gender: self.gender,
            age: self.age,
            month: self.month,
            weekday: self.weekday,
            time: self.time,
            position: self.position,
            cate2: self.cate2,
            cate3: self.cate3,
            title: self.title.clone(),
            desc: self.desc.clone(),
            ocr: self.ocr.clone(),
        }
    }

    pub fn from_key(image_id: &str, key: &AttributeTuple, clicked: bool) -> Self {
        ClickLogRecord {
            image_id: image_id.to_owned(),
            gender: key.gender,
            age: key.age,
            month: key.month,
            weekday: key.weekday,
            time: key.time,
            position: key.position,
            cate2: key.cate2,
            cate3: key.cate3,
            title: key.title.clone(),
            desc: key.desc.clone(),
            ocr: key.ocr.clone(),
            clicked: clicked as u8,
        }
    }

    /// Checks every categorical field and the click flag, reporting `index` on failure.
    pub fn validate(&self, index: usize) -> Result<()> {
        let fields = [
            (Attribute::Gender, self.gender),
            (Attribute::Age, self.age),
            (Attribute::Month, self.month),
            (Attribute::Weekday, self.weekday),
            (Attribute::Time, self.time),
            (Attribute::Position, self.position),
            (Attribute::Cate2, self.cate2),
            (Attribute::Cate3, self.cate3),
        ];
        for (attr, v) in fields {
            if !attr.contains(v as i64) {
                return Err(Error::MalformedRecord {
                    index,
                    attribute: attr.name(),
                    value: v as i64,
                });
            }
        }
        if self.clicked > 1 {
            return Err(Error::MalformedRecord {
                index,
                attribute: "clicked",
                value: self.clicked as i64,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_widths_sum_to_81() {
        let total: usize = Attribute::ALL.iter().map(|a| a.level_count()).sum();
        assert_eq!(total, 2 + 9 + 12 + 7 + 24 + 4 + 4 + 9 + 10);
    }

    #[test]
    fn validate_reports_offending_field() {
        let mut r = ClickLogRecord::from_key(
            "img",
            &AttributeTuple {
                gender: 1,
                age: 3,
                month: 4,
                weekday: 2,
                time: 0,
                position: 1,
                cate2: 1,
                cate3: 1,
                title: String::new(),
                desc: String::new(),
                ocr: String::new(),
            },
            false,
        );
        assert!(r.validate(0).is_ok());
        r.month = 13;
        match r.validate(7) {
            Err(Error::MalformedRecord {
                index, attribute, ..
            }) => {
                assert_eq!(index, 7);
                assert_eq!(attribute, "month");
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
