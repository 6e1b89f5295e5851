//! Flat binary window cache.
//!
//! Layout, all little-endian: `n, T_x, T_y, count` as u64, then for each
//! window its `x` rows followed by its `y` rows as f64. Origins and padding
//! flags are not stored; reloaded windows get origin = position in the file
//! and no padding.

use std::io::{Read, Write};
use std::path::Path;

use super::window::SeriesWindow;
use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub fn write_window_cache(path: &Path, windows: &[SeriesWindow]) -> Result<()> {
    let (n, tx, ty) = match windows.first() {
        Some(w) => (w.n_vars(), w.lookback(), w.horizon()),
        None => (0, 0, 0),
    };
    let mut buf = Vec::with_capacity(32 + windows.len() * (tx + ty) * n * 8);
    for h in [n, tx, ty, windows.len()] {
        buf.extend_from_slice(&(h as u64).to_le_bytes());
    }
    for w in windows {
        if w.x.shape() != [tx, n] || w.y.shape() != [ty, n] {
            return Err(Error::shape("window_cache", &[tx + ty, n], &[w.lookback() + w.horizon(), w.n_vars()]));
        }
        for v in w.x.data().iter().chain(w.y.data()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_window_cache(path: &Path) -> Result<Vec<SeriesWindow>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |msg: &str| Error::invalid("window_cache", format!("{}: {msg}", path.display()));
    if bytes.len() < 32 {
        return Err(bad("truncated header"));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().unwrap());
    let dims: Vec<usize> = (0..4)
        .map(|i| usize::try_from(word(i)).map_err(|_| bad("header field too large")))
        .collect::<Result<_>>()?;
    let (n, tx, ty, count) = (dims[0], dims[1], dims[2], dims[3]);
    let per = (tx + ty)
        .checked_mul(n)
        .ok_or_else(|| bad("header overflow"))?;
    let expected = per
        .checked_mul(count)
        .and_then(|c| c.checked_mul(8))
        .and_then(|c| c.checked_add(32))
        .ok_or_else(|| bad("header overflow"))?;
    if bytes.len() != expected {
        return Err(bad(&format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let floats: Vec<f64> = bytes[32..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(floats
        .chunks(per.max(1))
        .take(count)
        .enumerate()
        .map(|(origin, cells)| SeriesWindow {
            x: Tensor::new(&[tx, n], cells[..tx * n].to_vec()).expect("sized"),
            y: Tensor::new(&[ty, n], cells[tx * n..].to_vec()).expect("sized"),
            origin,
            pad_mask: vec![false; per],
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::synth_sinusoids;
    use crate::data::window::make_windows;
    use crate::numeric::Rng;

    #[test]
    fn round_trip() {
        let s = synth_sinusoids(&mut Rng::new(1), 3, 40, 0.1);
        let w = make_windows(&s, 6, 2, 3);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.bin");
        write_window_cache(&p, &w).unwrap();
        let back = read_window_cache(&p).unwrap();
        assert_eq!(back.len(), w.len());
        for (a, b) in back.iter().zip(&w) {
            assert_eq!(a.x, b.x);
            assert_eq!(a.y, b.y);
        }
        let len = std::fs::metadata(&p).unwrap().len() as usize;
        assert_eq!(len, 32 + w.len() * 8 * 3 * 8);
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.bin");
        std::fs::write(&p, [1u8; 40]).unwrap();
        assert!(read_window_cache(&p).is_err());
    }
}
