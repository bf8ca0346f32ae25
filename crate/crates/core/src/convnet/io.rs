//! Flat binary container of named float arrays:
//! `"DFNW"`, u32 count, then per array a u32-prefixed UTF-8 name, u32 rank,
//! u32 dims and little-endian f32 values.

use std::io::{Read, Write};
use std::path::Path;

use super::net::{Net, Param};
use super::tensor::Scalar;
use super::{NetError, NetSpec};

const MAGIC: &[u8; 4] = b"DFNW";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<(), NetError> {
    let v = u32::try_from(v).map_err(|_| NetError::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<usize, NetError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub fn write_named_arrays<W: Write>(mut w: W, arrays: &[NamedArray]) -> Result<(), NetError> {
    w.write_all(MAGIC)?;
    put_u32(&mut w, arrays.len())?;
    for a in arrays {
        if a.shape.iter().product::<usize>() != a.data.len() {
            return Err(NetError::Format(format!("{}: shape {:?} vs {} values", a.name, a.shape, a.data.len())));
        }
        put_u32(&mut w, a.name.len())?;
        w.write_all(a.name.as_bytes())?;
        put_u32(&mut w, a.shape.len())?;
        for &d in &a.shape {
            put_u32(&mut w, d)?;
        }
        let mut buf = Vec::with_capacity(a.data.len() * 4);
        for v in &a.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

const MAX_ELEMENTS: usize = 1 << 30;

pub fn read_named_arrays<R: Read>(mut r: R) -> Result<Vec<NamedArray>, NetError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NetError::Format("bad magic".into()));
    }
    let count = get_u32(&mut r)?;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = get_u32(&mut r)?;
        let mut name = vec![0u8; len.min(1 << 16)];
        if len > name.len() {
            return Err(NetError::Format("array name too long".into()));
        }
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| NetError::Format("array name is not UTF-8".into()))?;
        let rank = get_u32(&mut r)?;
        if rank > 8 {
            return Err(NetError::Format(format!("{name}: rank {rank}")));
        }
        let shape = (0..rank).map(|_| get_u32(&mut r)).collect::<Result<Vec<_>, _>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= MAX_ELEMENTS)
            .ok_or_else(|| NetError::Format(format!("{name}: shape {shape:?} too large")))?;
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push(NamedArray { name, shape, data });
    }
    Ok(out)
}

impl<T: Scalar> Net<T> {
    /// Parameters as `<layer>.weight` / `<layer>.bias` arrays in layer order.
    pub fn to_named_arrays(&self) -> Vec<NamedArray> {
        let mut out = Vec::new();
        for (l, p) in self.spec.layers.iter().zip(&self.params) {
            if let Some(p) = p {
                out.push(NamedArray {
                    name: format!("{}.weight", l.name),
                    shape: p.weight_shape.clone(),
                    data: p.weight.iter().map(|&v| Scalar::to_f64(v) as f32).collect(),
                });
                out.push(NamedArray {
                    name: format!("{}.bias", l.name),
                    shape: vec![p.bias.len()],
                    data: p.bias.iter().map(|&v| Scalar::to_f64(v) as f32).collect(),
                });
            }
        }
        out
    }

    pub fn from_named_arrays(spec: &NetSpec, arrays: &[NamedArray]) -> Result<Self, NetError> {
        let mut net = Net::build(spec, 0)?;
        let find = |name: String, shape: &[usize]| -> Result<Vec<T>, NetError> {
            let a = arrays
                .iter()
                .find(|a| a.name == name)
                .ok_or_else(|| NetError::Format(format!("missing array {name}")))?;
            if a.shape != shape {
                return Err(NetError::ShapeMismatch(format!("{name}: {:?} vs {shape:?}", a.shape)));
            }
            Ok(a.data.iter().map(|&v| T::from_f64(v as f64)).collect())
        };
        for (l, p) in spec.layers.iter().zip(net.params.iter_mut()) {
            if let Some(p) = p {
                let weight = find(format!("{}.weight", l.name), &p.weight_shape)?;
                let bias = find(format!("{}.bias", l.name), &[p.bias.len()])?;
                *p = Param {
                    weight,
                    bias,
                    weight_shape: p.weight_shape.clone(),
                };
            }
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        let f = std::fs::File::create(path)?;
        write_named_arrays(std::io::BufWriter::new(f), &self.to_named_arrays())
    }

    pub fn load(spec: &NetSpec, path: &Path) -> Result<Self, NetError> {
        let f = std::fs::File::open(path)?;
        Self::from_named_arrays(spec, &read_named_arrays(std::io::BufReader::new(f))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arrays_round_trip() {
        let arrays = vec![
            NamedArray {
                name: "a".into(),
                shape: vec![2, 3],
                data: vec![1.0, -2.5, 3.0, f32::MIN_POSITIVE, 0.0, 7.25],
            },
            NamedArray {
                name: "bé".into(),
                shape: vec![0],
                data: vec![],
            },
        ];
        let mut buf = Vec::new();
        write_named_arrays(&mut buf, &arrays).unwrap();
        assert_eq!(&buf[..4], b"DFNW");
        assert_eq!(read_named_arrays(&buf[..]).unwrap(), arrays);
        assert!(read_named_arrays(&buf[..buf.len() - 1]).is_err());
        buf[0] = b'X';
        assert!(matches!(read_named_arrays(&buf[..]), Err(NetError::Format(_))));
    }

    #[test]
    fn net_round_trip() {
        let spec = NetSpec::mini_depth_net(4);
        let net = Net::<f32>::build(&spec, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        net.save(&path).unwrap();
        let back = Net::<f32>::load(&spec, &path).unwrap();
        assert_eq!(back.params, net.params);
        let other = NetSpec::mini_depth_net(5);
        assert!(Net::<f32>::load(&other, &path).is_err());
    }
}
