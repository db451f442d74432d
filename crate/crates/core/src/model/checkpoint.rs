//! Checkpoint format: a plain-text manifest (`name shape offset` lines)
//! followed by a single TNSR blob holding all tensors back to back.
//! Round trips are bit-exact for values produced under 32-bit precision.

use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::{ModelConfig, ModelWeights};

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source: e,
    }
}

impl ModelWeights {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries: Vec<(String, Vec<usize>, usize)> = Vec::new();
        let mut flat: Vec<f64> = Vec::new();
        {
            let mut push = |name: &str, t: &Tensor| {
                entries.push((name.to_string(), t.shape().to_vec(), flat.len()));
                flat.extend_from_slice(t.data());
            };
            push("patch_embed", &self.patch_embed);
            self.visit_params(|n, t| push(n, t));
        }

        let mut manifest = String::new();
        let cfg = &self.config;
        manifest.push_str(&format!("CKPT v1 {}\n", entries.len()));
        manifest.push_str(&format!(
            "config {} {} {} {} {} {} {} {}\n",
            cfg.image_size,
            cfg.channels,
            cfg.patch_size,
            cfg.token_dim,
            cfg.layers,
            cfg.heads,
            cfg.num_conditions,
            cfg.mlp_hidden
        ));
        for (name, shape, offset) in &entries {
            let shape: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("{name} {} {offset}\n", shape.join("x")));
        }
        manifest.push_str("DATA\n");

        let blob = Tensor::new(vec![flat.len()], flat)?;
        let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
        f.write_all(manifest.as_bytes())
            .and_then(|_| blob.write_tnsr(&mut f))
            .map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<ModelWeights> {
        let f = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
        let mut reader = BufReader::new(f);
        let pstr = path.display().to_string();
        let mut byte_pos = 0u64;
        let bad = |offset: u64, detail: String| Error::Format {
            path: pstr.clone(),
            offset,
            detail,
        };

        let mut line = String::new();
        let mut read_line = |reader: &mut BufReader<std::fs::File>,
                             byte_pos: &mut u64|
         -> Result<String> {
            line.clear();
            let n = reader.read_line(&mut line).map_err(|e| io_err(path, e))?;
            if n == 0 {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    offset: *byte_pos,
                    detail: "unexpected end of manifest".into(),
                });
            }
            *byte_pos += n as u64;
            Ok(line.trim_end().to_string())
        };

        let header = read_line(&mut reader, &mut byte_pos)?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != "CKPT" || parts[1] != "v1" {
            return Err(bad(0, format!("bad header line: {header}")));
        }
        let count: usize = parts[2]
            .parse()
            .map_err(|_| bad(0, "bad tensor count".into()))?;

        let cfg_line = read_line(&mut reader, &mut byte_pos)?;
        let cp: Vec<&str> = cfg_line.split_whitespace().collect();
        if cp.len() != 9 || cp[0] != "config" {
            return Err(bad(byte_pos, format!("bad config line: {cfg_line}")));
        }
        let nums: Vec<usize> = cp[1..]
            .iter()
            .map(|s| s.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad(byte_pos, "non-numeric config field".into()))?;
        let config = ModelConfig {
            image_size: nums[0],
            channels: nums[1],
            patch_size: nums[2],
            token_dim: nums[3],
            layers: nums[4],
            heads: nums[5],
            num_conditions: nums[6],
            mlp_hidden: nums[7],
        };
        config.validate()?;

        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let entry = read_line(&mut reader, &mut byte_pos)?;
            let ep: Vec<&str> = entry.split_whitespace().collect();
            if ep.len() != 3 {
                return Err(bad(byte_pos, format!("bad manifest line: {entry}")));
            }
            let shape: Vec<usize> = ep[1]
                .split('x')
                .map(|s| s.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(byte_pos, format!("bad shape in: {entry}")))?;
            let offset: usize = ep[2]
                .parse()
                .map_err(|_| bad(byte_pos, format!("bad offset in: {entry}")))?;
            entries.push((ep[0].to_string(), shape, offset));
        }
        let data_line = read_line(&mut reader, &mut byte_pos)?;
        if data_line != "DATA" {
            return Err(bad(byte_pos, format!("expected DATA, got: {data_line}")));
        }

        // read_line buffers; re-seek the underlying file to the blob start.
        let mut f = reader.into_inner();
        f.seek(SeekFrom::Start(byte_pos)).map_err(|e| io_err(path, e))?;
        let blob = Tensor::read_tnsr_from(&mut ByteCounter(&mut f), &pstr, byte_pos)?;

        let mut weights = ModelWeights::init(&config, 0)?;
        let take = |name: &str, want_shape: &[usize]| -> Result<Tensor> {
            let (_, shape, offset) = entries
                .iter()
                .find(|(n, _, _)| n == name)
                .ok_or_else(|| bad(byte_pos, format!("manifest missing tensor {name}")))?;
            if shape != want_shape {
                return Err(bad(
                    byte_pos,
                    format!("tensor {name} has shape {shape:?}, expected {want_shape:?}"),
                ));
            }
            let len: usize = shape.iter().product();
            if offset + len > blob.len() {
                return Err(bad(byte_pos, format!("tensor {name} overruns blob")));
            }
            Tensor::new(shape.clone(), blob.data()[*offset..offset + len].to_vec())
        };

        weights.patch_embed = take("patch_embed", weights.patch_embed.shape())?;
        let mut failed = None;
        weights.visit_params_mut(|name, t| {
            if failed.is_some() {
                return;
            }
            match take(name, t.shape()) {
                Ok(loaded) => *t = loaded,
                Err(e) => failed = Some(e),
            }
        });
        if let Some(e) = failed {
            return Err(e);
        }
        Ok(weights)
    }
}

struct ByteCounter<'a, R: Read>(&'a mut R);

impl<R: Read> Read for ByteCounter<'_, R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        self.0.read(buf)
    }
}
