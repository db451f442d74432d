//! Indexed store of background key/value pairs per (timestep, layer) with an
//! explicit lifecycle and a float-count meter.
//!
//! RETAIN mode keeps every entry for the whole edit session (peak residency
//! N * M * 2 * B * d floats); STREAM mode holds at most one timestep at a
//! time (peak M * 2 * B * d, independent of the grid length).

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheMode {
    /// Inversion-based editing: entries are never overwritten.
    Retain,
    /// Inversion-free editing: at most one timestep resident at a time.
    Stream,
}

/// Background K/V rows recorded at one (timestep, layer).
#[derive(Debug, Clone, PartialEq)]
pub struct KvEntry {
    pub timestep: usize,
    pub layer: usize,
    pub bg_positions: Vec<usize>,
    pub k_bg: Tensor,
    pub v_bg: Tensor,
}

impl KvEntry {
    pub fn new(
        timestep: usize,
        layer: usize,
        bg_positions: Vec<usize>,
        k_bg: Tensor,
        v_bg: Tensor,
    ) -> Result<Self> {
        if k_bg.shape() != v_bg.shape() {
            return Err(Error::shape(
                "KvEntry",
                format!("K {:?} vs V {:?}", k_bg.shape(), v_bg.shape()),
            ));
        }
        if k_bg.rows() != bg_positions.len() {
            return Err(Error::shape(
                "KvEntry",
                format!(
                    "{} rows vs {} positions",
                    k_bg.rows(),
                    bg_positions.len()
                ),
            ));
        }
        if bg_positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "background positions must be strictly increasing".into(),
            ));
        }
        Ok(KvEntry {
            timestep,
            layer,
            bg_positions,
            k_bg,
            v_bg,
        })
    }

    pub fn floats(&self) -> usize {
        self.k_bg.len() + self.v_bg.len()
    }
}

/// Running count of cached floats.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MemoryMeter {
    current_floats: usize,
    peak_floats: usize,
}

impl MemoryMeter {
    pub fn current_floats(&self) -> usize {
        self.current_floats
    }

    pub fn peak_floats(&self) -> usize {
        self.peak_floats
    }

    fn grow(&mut self, floats: usize) {
        self.current_floats += floats;
        self.peak_floats = self.peak_floats.max(self.current_floats);
    }

    fn shrink(&mut self, floats: usize) {
        debug_assert!(self.current_floats >= floats);
        self.current_floats -= floats;
    }
}

/// The cache proper.
#[derive(Debug, Clone)]
pub struct KvCache {
    mode: CacheMode,
    store: BTreeMap<(usize, usize), KvEntry>,
    meter: MemoryMeter,
}

impl KvCache {
    pub fn new(mode: CacheMode) -> Self {
        KvCache {
            mode,
            store: BTreeMap::new(),
            meter: MemoryMeter::default(),
        }
    }

    pub fn mode(&self) -> CacheMode {
        self.mode
    }

    pub fn meter(&self) -> &MemoryMeter {
        &self.meter
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    /// Store an entry. Duplicate (timestep, layer) keys are rejected in
    /// RETAIN mode; STREAM mode additionally rejects holding more than one
    /// timestep at once.
    pub fn append(&mut self, entry: KvEntry) -> Result<()> {
        let key = (entry.timestep, entry.layer);
        if self.store.contains_key(&key) {
            return Err(Error::DuplicateCacheEntry {
                timestep: entry.timestep,
                layer: entry.layer,
            });
        }
        if self.mode == CacheMode::Stream
            && self.store.keys().any(|&(i, _)| i != entry.timestep)
        {
            return Err(Error::Config(format!(
                "stream cache already holds a different timestep than {}",
                entry.timestep
            )));
        }
        self.meter.grow(entry.floats());
        self.store.insert(key, entry);
        Ok(())
    }

    pub fn get(&self, timestep: usize, layer: usize) -> Result<&KvEntry> {
        self.store
            .get(&(timestep, layer))
            .ok_or(Error::MissingCacheEntry { timestep, layer })
    }

    pub fn contains(&self, timestep: usize, layer: usize) -> bool {
        self.store.contains_key(&(timestep, layer))
    }

    /// Drop all entries of one timestep. Releasing an absent timestep is a
    /// no-op; the peak is never lowered.
    pub fn release_timestep(&mut self, timestep: usize) {
        let keys: Vec<_> = self
            .store
            .range((timestep, 0)..(timestep + 1, 0))
            .map(|(&k, _)| k)
            .collect();
        for key in keys {
            let entry = self.store.remove(&key).expect("key just listed");
            self.meter.shrink(entry.floats());
        }
    }

    pub fn timesteps(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.store.keys().map(|&(i, _)| i).collect();
        out.dedup();
        out
    }

    // ---- persistence -------------------------------------------------
    //
    // Header `KVCH v1 <entries>`, one manifest line `i j B` per entry, then
    // per entry three TNSR blobs in manifest order: positions (as floats),
    // K rows, V rows. Little-endian throughout.

    pub fn persist(&self, path: &Path) -> Result<()> {
        if self.mode != CacheMode::Retain {
            return Err(Error::Config(
                "only a retain-mode cache can be persisted".into(),
            ));
        }
        let io = |e: std::io::Error| Error::Io {
            path: path.display().to_string(),
            source: e,
        };
        let mut f = std::fs::File::create(path).map_err(io)?;
        let mut header = format!("KVCH v1 {}\n", self.store.len());
        for entry in self.store.values() {
            header.push_str(&format!(
                "{} {} {}\n",
                entry.timestep,
                entry.layer,
                entry.bg_positions.len()
            ));
        }
        f.write_all(header.as_bytes()).map_err(io)?;
        for entry in self.store.values() {
            let positions = Tensor::new(
                vec![entry.bg_positions.len()],
                entry.bg_positions.iter().map(|&p| p as f64).collect(),
            )?;
            positions.write_tnsr(&mut f).map_err(io)?;
            entry.k_bg.write_tnsr(&mut f).map_err(io)?;
            entry.v_bg.write_tnsr(&mut f).map_err(io)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<KvCache> {
        let io = |e: std::io::Error| Error::Io {
            path: path.display().to_string(),
            source: e,
        };
        let pstr = path.display().to_string();
        let f = std::fs::File::open(path).map_err(io)?;
        let mut reader = BufReader::new(f);
        let mut byte_pos = 0u64;
        let mut line = String::new();
        let mut next_line = |reader: &mut BufReader<std::fs::File>,
                             byte_pos: &mut u64|
         -> Result<String> {
            line.clear();
            let n = reader.read_line(&mut line).map_err(|e| Error::Io {
                path: path.display().to_string(),
                source: e,
            })?;
            if n == 0 {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    offset: *byte_pos,
                    detail: "truncated manifest".into(),
                });
            }
            *byte_pos += n as u64;
            Ok(line.trim_end().to_string())
        };

        let header = next_line(&mut reader, &mut byte_pos)?;
        let hp: Vec<&str> = header.split_whitespace().collect();
        if hp.len() != 3 || hp[0] != "KVCH" || hp[1] != "v1" {
            return Err(Error::Format {
                path: pstr,
                offset: 0,
                detail: format!("bad header: {header}"),
            });
        }
        let count: usize = hp[2].parse().map_err(|_| Error::Format {
            path: pstr.clone(),
            offset: 0,
            detail: "bad entry count".into(),
        })?;

        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let entry = next_line(&mut reader, &mut byte_pos)?;
            let ep: Vec<&str> = entry.split_whitespace().collect();
            let parsed: Option<(usize, usize, usize)> = match ep.as_slice() {
                [i, j, b] => match (i.parse(), j.parse(), b.parse()) {
                    (Ok(i), Ok(j), Ok(b)) => Some((i, j, b)),
                    _ => None,
                },
                _ => None,
            };
            let (i, j, b) = parsed.ok_or_else(|| Error::Format {
                path: pstr.clone(),
                offset: byte_pos,
                detail: format!("bad manifest line: {entry}"),
            })?;
            manifest.push((i, j, b));
        }

        let mut f = reader.into_inner();
        f.seek(SeekFrom::Start(byte_pos)).map_err(io)?;
        let mut cache = KvCache::new(CacheMode::Retain);
        let mut offset = byte_pos;
        for (i, j, b) in manifest {
            let positions_t = Tensor::read_tnsr_from(&mut ReadOnly(&mut f), &pstr, offset)?;
            offset += positions_t.tnsr_len();
            let k_bg = Tensor::read_tnsr_from(&mut ReadOnly(&mut f), &pstr, offset)?;
            offset += k_bg.tnsr_len();
            let v_bg = Tensor::read_tnsr_from(&mut ReadOnly(&mut f), &pstr, offset)?;
            offset += v_bg.tnsr_len();
            if positions_t.len() != b {
                return Err(Error::Format {
                    path: pstr.clone(),
                    offset,
                    detail: format!(
                        "entry ({i},{j}) declares {b} rows but stores {}",
                        positions_t.len()
                    ),
                });
            }
            let bg_positions: Vec<usize> =
                positions_t.data().iter().map(|&p| p as usize).collect();
            cache.append(KvEntry::new(i, j, bg_positions, k_bg, v_bg)?)?;
        }
        Ok(cache)
    }
}

struct ReadOnly<'a, R: Read>(&'a mut R);

impl<R: Read> Read for ReadOnly<'_, R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        self.0.read(buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn entry(i: usize, j: usize, b: usize, d: usize, seed: u64) -> KvEntry {
        let mut rng = Rng::new(seed);
        KvEntry::new(
            i,
            j,
            (0..b).collect(),
            rng.gaussian(vec![b, d]),
            rng.gaussian(vec![b, d]),
        )
        .unwrap()
    }

    #[test]
    fn meter_counts_appended_floats() {
        let mut cache = KvCache::new(CacheMode::Retain);
        assert_eq!(cache.meter().current_floats(), 0);
        let (m, b, d) = (3, 4, 8);
        for j in 0..m {
            cache.append(entry(1, j, b, d, j as u64)).unwrap();
        }
        assert_eq!(cache.meter().current_floats(), m * 2 * b * d);
        assert_eq!(cache.meter().peak_floats(), m * 2 * b * d);
    }

    #[test]
    fn duplicate_key_rejected_in_retain() {
        let mut cache = KvCache::new(CacheMode::Retain);
        cache.append(entry(1, 0, 2, 4, 1)).unwrap();
        let err = cache.append(entry(1, 0, 2, 4, 2)).unwrap_err();
        assert!(matches!(err, Error::DuplicateCacheEntry { .. }));
    }

    #[test]
    fn get_round_trip_and_meter_untouched() {
        let mut cache = KvCache::new(CacheMode::Retain);
        let e = entry(2, 1, 3, 4, 5);
        cache.append(e.clone()).unwrap();
        let before = cache.meter().clone();
        let got = cache.get(2, 1).unwrap();
        assert_eq!(got, &e);
        assert_eq!(cache.meter(), &before);
    }

    #[test]
    fn missing_key_names_indices() {
        let cache = KvCache::new(CacheMode::Retain);
        let err = cache.get(7, 3).unwrap_err();
        assert!(err.to_string().contains('7') && err.to_string().contains('3'));
    }

    #[test]
    fn release_drops_to_zero_and_keeps_peak() {
        let mut cache = KvCache::new(CacheMode::Stream);
        for j in 0..4 {
            cache.append(entry(5, j, 2, 8, j as u64)).unwrap();
        }
        let peak = cache.meter().peak_floats();
        cache.release_timestep(5);
        assert_eq!(cache.meter().current_floats(), 0);
        assert_eq!(cache.meter().peak_floats(), peak);
        // Releasing an absent timestep is a no-op.
        cache.release_timestep(99);
        assert_eq!(cache.meter().current_floats(), 0);
    }

    #[test]
    fn stream_peak_independent_of_step_count() {
        let (m, b, d) = (4, 3, 8);
        let mut peaks = Vec::new();
        for n in [4usize, 8, 16] {
            let mut cache = KvCache::new(CacheMode::Stream);
            for i in 1..=n {
                for j in 0..m {
                    cache.append(entry(i, j, b, d, (i * 10 + j) as u64)).unwrap();
                }
                cache.release_timestep(i);
            }
            peaks.push(cache.meter().peak_floats());
        }
        assert_eq!(peaks[0], m * 2 * b * d);
        assert!(peaks.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn stream_rejects_second_timestep_while_resident() {
        let mut cache = KvCache::new(CacheMode::Stream);
        cache.append(entry(1, 0, 2, 4, 1)).unwrap();
        assert!(cache.append(entry(2, 0, 2, 4, 2)).is_err());
        cache.release_timestep(1);
        assert!(cache.append(entry(2, 0, 2, 4, 2)).is_ok());
    }

    #[test]
    fn retain_peak_formula() {
        let (n, m, b, d) = (6, 3, 5, 8);
        let mut cache = KvCache::new(CacheMode::Retain);
        for i in 1..=n {
            for j in 0..m {
                cache.append(entry(i, j, b, d, (i * 100 + j) as u64)).unwrap();
            }
        }
        assert_eq!(cache.meter().peak_floats(), n * m * 2 * b * d);
    }

    #[test]
    fn persist_load_identity() {
        let dir = std::env::temp_dir().join("kvedit_cache_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("cache.kvch");
        let mut cache = KvCache::new(CacheMode::Retain);
        for i in 1..=3 {
            for j in 0..2 {
                cache.append(entry(i, j, 3, 4, (i * 10 + j) as u64)).unwrap();
            }
        }
        // An empty-background entry must survive the round trip too.
        cache
            .append(
                KvEntry::new(4, 0, vec![], Tensor::zeros(vec![0, 4]), Tensor::zeros(vec![0, 4]))
                    .unwrap(),
            )
            .unwrap();
        cache.persist(&path).unwrap();
        let back = KvCache::load(&path).unwrap();
        assert_eq!(back.len(), cache.len());
        for (key, e) in &cache.store {
            assert_eq!(back.store.get(key), Some(e));
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn load_rejects_truncated_file() {
        let dir = std::env::temp_dir().join("kvedit_cache_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trunc.kvch");
        let mut cache = KvCache::new(CacheMode::Retain);
        cache.append(entry(1, 0, 3, 4, 9)).unwrap();
        cache.persist(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = KvCache::load(&path).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn stream_cache_cannot_persist() {
        let cache = KvCache::new(CacheMode::Stream);
        let path = std::env::temp_dir().join("never_written.kvch");
        assert!(cache.persist(&path).is_err());
    }
}
