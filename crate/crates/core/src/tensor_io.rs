//! Binary tensor file format shared by the vision and audio paths.
//!
//! Layout, all little-endian:
//!
//! ```text
//! u32 rank
//! u32 dim[0] .. dim[rank-1]
//! f32 data[product(dims)]      (row-major)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn write_tensor<W: Write>(mut out: W, tensor: &Tensor) -> Result<()> {
    out.write_all(&(tensor.rank() as u32).to_le_bytes())?;
    for &d in tensor.shape() {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in tensor.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_tensor<R: Read>(mut input: R) -> Result<Tensor> {
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let rank = u32::from_le_bytes(word) as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::input(format!("tensor file rank {rank} is not supported")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        input.read_exact(&mut word)?;
        shape.push(u32::from_le_bytes(word) as usize);
    }
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 4];
    input.read_exact(&mut bytes)?;
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Tensor::new(shape, data)
}

pub fn save(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_tensor(std::io::BufWriter::new(file), tensor)
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    let file = std::fs::File::open(path)?;
    read_tensor(std::io::BufReader::new(file))
}

/// Little-endian bytes of the data section, used for checksums.
pub fn data_bytes(tensor: &Tensor) -> Vec<u8> {
    tensor.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let mut expected = Vec::new();
        expected.extend(2u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u32.to_le_bytes());
        expected.extend(1.0f32.to_le_bytes());
        expected.extend((-2.5f32).to_le_bytes());
        assert_eq!(buf, expected);
        assert_eq!(read_tensor(buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn truncated_file_is_an_error() {
        let t = Tensor::full(&[3, 3], 1.0);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(read_tensor(buf.as_slice()).is_err());
    }
}
