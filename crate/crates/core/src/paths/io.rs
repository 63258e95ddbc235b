//! Flat CSV and binary encodings of a [`NoiseBundle`].
//!
//! CSV: header `path,step,dW,dY[,weight]`, one row per (path, step), path-major.
//! The horizon is not stored in CSV and must be supplied on import.
//!
//! Binary (little endian):
//!
//! ```text
//! magic    8 bytes  "NRNOISE1"
//! steps    u32
//! flags    u32      bit 0: per-path weights follow the increments
//! paths    u64
//! horizon  f64
//! dW       paths*steps f64, path-major
//! dY       paths*steps f64, path-major
//! weights  paths f64 (only if flag bit 0)
//! ```

use std::io::{Read, Write};

use super::{NoiseBundle, NoiseOrigin, TimeGrid};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"NRNOISE1";
const HEADER_LEN: usize = 8 + 4 + 4 + 8 + 8;
const FLAG_WEIGHTS: u32 = 1;

fn parse_err(msg: impl Into<String>) -> Error {
    Error::Parse(msg.into())
}

impl NoiseBundle {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let weighted = self.weights.is_some();
        if weighted {
            w.write_record(["path", "step", "dW", "dY", "weight"])?;
        } else {
            w.write_record(["path", "step", "dW", "dY"])?;
        }
        for j in 0..self.n_paths {
            for i in 0..self.grid.steps() {
                let mut rec = vec![
                    j.to_string(),
                    i.to_string(),
                    format!("{:e}", self.dw(j, i)),
                    format!("{:e}", self.dy(j, i)),
                ];
                if weighted {
                    rec.push(format!("{:e}", self.weight(j)));
                }
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the CSV layout written by [`NoiseBundle::write_csv`].
    ///
    /// Rows must be complete and ordered path-major; weights, when present,
    /// must agree across the rows of a path.
    pub fn read_csv<R: Read>(reader: R, horizon: f64) -> Result<NoiseBundle> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let cols: Vec<&str> = headers.iter().map(str::trim).collect();
        let weighted = match cols.as_slice() {
            ["path", "step", "dW", "dY"] => false,
            ["path", "step", "dW", "dY", "weight"] => true,
            _ => return Err(parse_err(format!("unexpected noise CSV header {cols:?}"))),
        };

        let mut dw = Vec::new();
        let mut dy = Vec::new();
        let mut weights = Vec::new();
        let mut steps: Option<usize> = None;
        let (mut path, mut step) = (0usize, 0usize);

        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let field = |idx: usize| -> Result<&str> {
                rec.get(idx)
                    .map(str::trim)
                    .ok_or_else(|| parse_err(format!("row {row}: missing column {idx}")))
            };
            let p: usize = field(0)?
                .parse()
                .map_err(|_| parse_err(format!("row {row}: bad path index")))?;
            let s: usize = field(1)?
                .parse()
                .map_err(|_| parse_err(format!("row {row}: bad step index")))?;

            if p != path || s != step {
                // Either the next step of the current path, or step 0 of the next path.
                let closes_path = s == 0 && p == path + 1 && step > 0;
                if !closes_path {
                    return Err(parse_err(format!(
                        "row {row}: expected path {path} step {step} (or the start of path {}), found path {p} step {s}",
                        path + 1
                    )));
                }
                match steps {
                    None => steps = Some(step),
                    Some(n) if n != step => {
                        return Err(parse_err(format!("path {path} has {step} steps, expected {n}")))
                    }
                    _ => {}
                }
                path = p;
                step = 0;
            }
            if let Some(n) = steps {
                if step >= n {
                    return Err(parse_err(format!("path {path} has more than {n} steps")));
                }
            }

            let num = |idx: usize, name: &str| -> Result<f64> {
                let v: f64 = field(idx)?
                    .parse()
                    .map_err(|_| parse_err(format!("row {row}: bad {name}")))?;
                if !v.is_finite() {
                    return Err(parse_err(format!("row {row}: non-finite {name}")));
                }
                Ok(v)
            };
            dw.push(num(2, "dW")?);
            dy.push(num(3, "dY")?);
            if weighted {
                let w = num(4, "weight")?;
                if s == 0 {
                    weights.push(w);
                } else if weights.last() != Some(&w) {
                    return Err(parse_err(format!("row {row}: weight changes within path {p}")));
                }
            }
            step += 1;
        }

        if dw.is_empty() {
            return Err(parse_err("noise CSV has no rows"));
        }
        let n = match steps {
            None => step,
            Some(n) if n == step => n,
            Some(n) => return Err(parse_err(format!("last path has {step} steps, expected {n}"))),
        };
        let grid = TimeGrid::new(horizon, n)?;
        NoiseBundle::from_parts(
            grid,
            path + 1,
            dw,
            dy,
            weighted.then_some(weights),
            NoiseOrigin::Imported,
        )
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let extra = if self.weights.is_some() { self.n_paths } else { 0 };
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * (self.dw.len() * 2 + extra));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.grid.steps() as u32).to_le_bytes());
        let flags = if self.weights.is_some() { FLAG_WEIGHTS } else { 0 };
        out.extend_from_slice(&flags.to_le_bytes());
        out.extend_from_slice(&(self.n_paths as u64).to_le_bytes());
        out.extend_from_slice(&self.grid.horizon().to_le_bytes());
        for v in self.dw.iter().chain(self.dy.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(w) = &self.weights {
            for v in w {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Decodes the binary layout. The payload length is checked against the
    /// header before anything is allocated.
    pub fn from_binary(bytes: &[u8]) -> Result<NoiseBundle> {
        if bytes.len() < HEADER_LEN {
            return Err(parse_err("noise file shorter than its header"));
        }
        if &bytes[..8] != MAGIC {
            return Err(parse_err("bad noise file magic"));
        }
        let steps = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let flags = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
        let paths = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let horizon = f64::from_le_bytes(bytes[24..32].try_into().unwrap());
        if flags & !FLAG_WEIGHTS != 0 {
            return Err(parse_err(format!("unknown flags {flags:#x}")));
        }
        let paths = usize::try_from(paths).map_err(|_| parse_err("path count overflows"))?;
        if steps == 0 || paths == 0 {
            return Err(parse_err("noise file declares an empty bundle"));
        }
        let per_stream = paths
            .checked_mul(steps)
            .ok_or_else(|| parse_err("bundle size overflows"))?;
        let weighted = flags & FLAG_WEIGHTS != 0;
        let values = per_stream
            .checked_mul(2)
            .and_then(|v| v.checked_add(if weighted { paths } else { 0 }))
            .ok_or_else(|| parse_err("bundle size overflows"))?;
        let expected = values
            .checked_mul(8)
            .and_then(|v| v.checked_add(HEADER_LEN))
            .ok_or_else(|| parse_err("bundle size overflows"))?;
        if bytes.len() != expected {
            return Err(parse_err(format!(
                "noise file has {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        let grid = TimeGrid::new(horizon, steps).map_err(|e| parse_err(e.to_string()))?;
        let mut floats = bytes[HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let dw: Vec<f64> = floats.by_ref().take(per_stream).collect();
        let dy: Vec<f64> = floats.by_ref().take(per_stream).collect();
        let weights = weighted.then(|| floats.collect::<Vec<f64>>());
        NoiseBundle::from_parts(grid, paths, dw, dy, weights, NoiseOrigin::Imported)
            .map_err(|e| parse_err(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::{enumerate_binomial, make_time_grid, sample_noise};

    #[test]
    fn csv_roundtrip_gaussian() {
        let g = make_time_grid(1.0, 3).unwrap();
        let b = sample_noise(&g, 5, 1).unwrap();
        let mut buf = Vec::new();
        b.write_csv(&mut buf).unwrap();
        let back = NoiseBundle::read_csv(buf.as_slice(), 1.0).unwrap();
        assert_eq!(back.n_paths(), 5);
        assert_eq!(back.grid().steps(), 3);
        for j in 0..5 {
            assert_eq!(back.dw_path(j), b.dw_path(j));
            assert_eq!(back.dy_path(j), b.dy_path(j));
        }
    }

    #[test]
    fn binary_roundtrip_weighted() {
        let g = make_time_grid(2.0, 2).unwrap();
        let b = enumerate_binomial(&g).unwrap();
        let back = NoiseBundle::from_binary(&b.to_binary()).unwrap();
        assert_eq!(back.weights(), b.weights());
        assert_eq!(back.dw_path(7), b.dw_path(7));
        assert_eq!(back.grid(), b.grid());
    }

    #[test]
    fn csv_rejects_gaps_and_junk() {
        let missing = "path,step,dW,dY\n0,0,0.1,0.2\n0,1,0.1,0.2\n1,0,0.1,0.2\n";
        assert!(NoiseBundle::read_csv(missing.as_bytes(), 1.0).is_err());
        let junk = "path,step,dW,dY\n0,0,abc,0.2\n";
        assert!(NoiseBundle::read_csv(junk.as_bytes(), 1.0).is_err());
        let header = "a,b,c\n";
        assert!(NoiseBundle::read_csv(header.as_bytes(), 1.0).is_err());
        let empty = "path,step,dW,dY\n";
        assert!(NoiseBundle::read_csv(empty.as_bytes(), 1.0).is_err());
        let nan = "path,step,dW,dY\n0,0,NaN,0.2\n";
        assert!(NoiseBundle::read_csv(nan.as_bytes(), 1.0).is_err());
    }

    #[test]
    fn binary_rejects_truncation_and_bad_sizes() {
        let g = make_time_grid(1.0, 2).unwrap();
        let b = sample_noise(&g, 3, 4).unwrap();
        let bytes = b.to_binary();
        assert!(NoiseBundle::from_binary(&bytes[..bytes.len() - 1]).is_err());
        let mut huge = bytes.clone();
        huge[16..24].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(NoiseBundle::from_binary(&huge).is_err());
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(NoiseBundle::from_binary(&magic).is_err());
    }
}
