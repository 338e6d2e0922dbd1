//! Binary series store written by `ingest`.

use std::path::Path;

use tsrag::codec::{self, Decoder, Encoder};
use tsrag::data::Series;
use tsrag::Result;

pub const STORE_MAGIC: &[u8; 4] = b"TSRS";
pub const STORE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesStore {
    pub series: Vec<Series>,
}

impl SeriesStore {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::with_header(STORE_MAGIC, STORE_VERSION);
        e.usize(self.series.len());
        for s in &self.series {
            e.str(&s.id);
            e.str(&s.source_tag);
            e.usize(s.offset);
            e.vector(&s.values);
        }
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::open(bytes, STORE_MAGIC, STORE_VERSION, "series store")?;
        let n = d.usize()?;
        let mut series = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let id = d.str()?;
            let source_tag = d.str()?;
            let offset = d.usize()?;
            let values = d.vector()?;
            series.push(Series {
                id,
                values,
                source_tag,
                offset,
            });
        }
        d.finish()?;
        Ok(SeriesStore { series })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&codec::read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let store = SeriesStore {
            series: vec![
                Series::new("a:x", vec![1.0, 2.5, -3.0], "a"),
                Series::new("b:y", vec![], "b"),
            ],
        };
        let bytes = store.to_bytes();
        let back = SeriesStore::from_bytes(&bytes).unwrap();
        assert_eq!(back, store);
        assert_eq!(back.to_bytes(), bytes);
        for cut in [2, 10, bytes.len() - 1] {
            let err = SeriesStore::from_bytes(&bytes[..cut]).unwrap_err();
            assert_eq!(err.category(), tsrag::ErrorCategory::Format);
        }
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(SeriesStore::from_bytes(&bad).is_err());
    }
}
