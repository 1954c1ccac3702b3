//! Binary tensor files.
//!
//! Layout: magic `T3SR`, `u8` version (1), `u8` rank, one little-endian `u32`
//! extent per axis, then the little-endian `f32` payload in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"T3SR";
pub const VERSION: u8 = 1;

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    let rank = u8::try_from(t.rank()).map_err(|_| Error::Format(format!("rank {} too large", t.rank())))?;
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, rank])?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(4 * t.numel());
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor> {
    let mut head = [0u8; 6];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &head[..4])));
    }
    if head[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", head[4])));
    }
    let rank = head[5] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        shape.push(u32::from_le_bytes(b) as usize);
    }
    let n: usize = shape.iter().product();
    let mut payload = vec![0u8; 4 * n];
    r.read_exact(&mut payload)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data)
}

pub fn save(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    read_tensor(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new([2, 1], vec![1.0, -0.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let expected: Vec<u8> = [
            b"T3SR".as_slice(),
            &[1, 2],
            &2u32.to_le_bytes(),
            &1u32.to_le_bytes(),
            &1.0f32.to_le_bytes(),
            &(-0.5f32).to_le_bytes(),
        ]
        .concat();
        assert_eq!(buf, expected);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::zeros([3]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_tensor(bad.as_slice()).is_err());
        let mut bad = buf.clone();
        bad[4] = 2;
        assert!(read_tensor(bad.as_slice()).is_err());
        assert!(read_tensor(&buf[..buf.len() - 1]).is_err());
        let mut long = buf.clone();
        long.push(0);
        assert!(read_tensor(long.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(shape in prop::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|i| ((seed.wrapping_add(i as u64) % 1000) as f32 - 500.0) / 7.0).collect();
            let t = Tensor::new(shape, data).unwrap();
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            prop_assert_eq!(read_tensor(buf.as_slice()).unwrap(), t);
        }
    }
}
