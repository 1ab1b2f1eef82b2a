//! `SSZ1` tensor container.
//!
//! Layout (little endian): magic `SSZ1`, `u32` tensor count, then per
//! tensor a `u16` name length, UTF-8 name, `u8` dtype (0 = f32), `u8` rank,
//! `rank × u32` dims and the row-major payload.

use std::io::{Read, Write};
use std::path::Path;

use crate::compressor::GroupingPlan;
use crate::error::{Error, Result};
use crate::micronet::{ConvGeometry, GroupedLayer, MicroNet};
use crate::tensor::{TensorShape, WeightTensor};

pub const MAGIC: &[u8; 4] = b"SSZ1";
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: Vec<u32>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        let numel: u64 = dims.iter().map(|&d| d as u64).product();
        if numel != data.len() as u64 {
            return Err(Error::Checkpoint(format!("{name}: {} values for dims {dims:?}", data.len())));
        }
        if name.len() > u16::MAX as usize || dims.len() > u8::MAX as usize {
            return Err(Error::Checkpoint(format!("{name}: name or rank too long")));
        }
        Ok(Self { name, dims, data })
    }

    fn from_f64(name: impl Into<String>, dims: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(name, dims.iter().map(|&d| d as u32).collect(), data.iter().map(|&v| v as f32).collect())
    }

    fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
}

fn truncated() -> Error {
    Error::Checkpoint("truncated file".into())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| if e.kind() == std::io::ErrorKind::UnexpectedEof { truncated() } else { e.into() })
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b)?;
    Ok(b[0])
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn require(&self, name: &str) -> Result<&NamedTensor> {
        self.get(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            w.write_all(&(t.name.len() as u16).to_le_bytes())?;
            w.write_all(t.name.as_bytes())?;
            w.write_all(&[DTYPE_F32, t.dims.len() as u8])?;
            for d in &t.dims {
                w.write_all(&d.to_le_bytes())?;
            }
            let mut payload = Vec::with_capacity(4 * t.data.len());
            for v in &t.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&payload)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic, not an SSZ1 file".into()));
        }
        let count = read_u32(&mut r)?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = read_u16(&mut r)? as usize;
            let mut name = vec![0u8; len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let dtype = read_u8(&mut r)?;
            if dtype != DTYPE_F32 {
                return Err(Error::Checkpoint(format!("{name}: unsupported dtype {dtype}")));
            }
            let rank = read_u8(&mut r)? as usize;
            let dims = (0..rank).map(|_| read_u32(&mut r)).collect::<Result<Vec<_>>>()?;
            let numel = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize));
            let numel = numel.ok_or_else(|| Error::Checkpoint(format!("{name}: dims overflow")))?;
            let mut bytes = vec![0u8; numel.checked_mul(4).ok_or_else(truncated)?];
            read_exact(&mut r, &mut bytes)?;
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push(NamedTensor { name, dims, data });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Grouped or shuffled conv weights are stored with rank 5:
    /// `(G, c_out/G, c_in/G, k, k)`.
    pub fn is_compressed(&self) -> bool {
        self.tensors.iter().any(|t| t.name.ends_with(".weight") && t.name.starts_with("conv") && t.dims.len() == 5)
    }

    /// Parameters are stored as f32; see [`round_to_f32`].
    pub fn from_net(net: &MicroNet) -> Result<Self> {
        let mut tensors = Vec::new();
        for (i, l) in net.convs().iter().enumerate() {
            let (g, k) = (l.groups(), l.k());
            let w = l.weights().as_slice();
            let dims = if l.is_dense() {
                vec![l.c_out(), l.c_in(), k, k]
            } else {
                vec![g, l.c_out() / g, l.c_in() / g, k, k]
            };
            tensors.push(NamedTensor::from_f64(format!("conv{i}.weight"), &dims, w)?);
            tensors.push(NamedTensor::from_f64(format!("conv{i}.bias"), &[l.c_out()], l.bias())?);
        }
        tensors.push(NamedTensor::from_f64("fc.weight", &[net.n_classes(), net.feature_dim()], net.fc_weight())?);
        tensors.push(NamedTensor::from_f64("fc.bias", &[net.n_classes()], net.fc_bias())?);
        Ok(Self { tensors })
    }

    /// Rebuilds a network. Grouped layers take their shuffles from `plan`.
    pub fn to_net(&self, input: TensorShape, arch: &[ConvGeometry], plan: Option<&GroupingPlan>) -> Result<MicroNet> {
        let mut convs = Vec::with_capacity(arch.len());
        for (i, g) in arch.iter().enumerate() {
            let w = self.require(&format!("conv{i}.weight"))?;
            let b = self.require(&format!("conv{i}.bias"))?;
            let dims: Vec<usize> = w.dims.iter().map(|&d| d as usize).collect();
            if b.dims != [g.c_out as u32] {
                return Err(Error::Checkpoint(format!("conv{i}.bias has dims {:?}", b.dims)));
            }
            let layer = match dims.as_slice() {
                &[co, ci, k1, k2] if (co, ci, k1, k2) == (g.c_out, g.c_in, g.k, g.k) => {
                    GroupedLayer::dense(WeightTensor::new(co, ci, g.k, w.to_f64())?, b.to_f64(), g.stride, g.padding)?
                }
                &[groups, co, ci, k1, k2] if groups * co == g.c_out && groups * ci == g.c_in && k1 == g.k && k2 == g.k => {
                    let lp = plan
                        .and_then(|p| p.layers.get(i))
                        .ok_or_else(|| Error::Checkpoint(format!("conv{i} is grouped; a plan is required")))?;
                    if lp.groups() != groups {
                        return Err(Error::Checkpoint(format!("conv{i} has {groups} groups, plan says {}", lp.groups())));
                    }
                    let wt = WeightTensor::new(g.c_out, ci, g.k, w.to_f64())?;
                    GroupedLayer::new(groups, wt, b.to_f64(), lp.gather_in.clone(), lp.scatter_out.clone(), g.stride, g.padding)?
                }
                _ => return Err(Error::Checkpoint(format!("conv{i}.weight has dims {dims:?}, expected {g:?}"))),
            };
            convs.push(layer);
        }
        let fcw = self.require("fc.weight")?;
        let fcb = self.require("fc.bias")?;
        let feat = arch.last().map_or(input.channels, |g| g.c_out);
        if fcw.dims.len() != 2 || fcw.dims[1] as usize != feat || fcb.dims != [fcw.dims[0]] {
            return Err(Error::Checkpoint(format!("classifier dims {:?}/{:?}", fcw.dims, fcb.dims)));
        }
        if self.tensors.len() != 2 * arch.len() + 2 {
            return Err(Error::Checkpoint(format!("{} tensors, expected {}", self.tensors.len(), 2 * arch.len() + 2)));
        }
        MicroNet::from_parts(input, convs, fcw.to_f64(), fcb.to_f64())
    }
}

/// Rounds every parameter to the nearest f32 so that checkpoints round-trip
/// exactly.
pub fn round_to_f32(net: &mut MicroNet) {
    for p in net.param_slices_mut() {
        for v in p.iter_mut() {
            *v = f64::from(*v as f32);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compressor::compress_model;
    use crate::micronet::ACCEPTANCE_ARCH;
    use crate::tensor::{Norm, Permutation};

    fn shape() -> TensorShape {
        TensorShape::new(3, 16, 16).unwrap()
    }

    #[test]
    fn dense_round_trip_is_bit_exact() {
        let mut net = MicroNet::acceptance(0);
        round_to_f32(&mut net);
        let ck = Checkpoint::from_net(&net).unwrap();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"SSZ1");
        let back = Checkpoint::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        assert!(!back.is_compressed());
        assert_eq!(back.to_net(shape(), &ACCEPTANCE_ARCH, None).unwrap(), net);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn compressed_round_trip_needs_the_plan() {
        let mut net = MicroNet::acceptance(1);
        round_to_f32(&mut net);
        let perms: Vec<_> = net.convs().iter().map(|l| (Permutation::identity(l.c_out()), Permutation::identity(l.c_in()))).collect();
        let (small, plan) = compress_model(&net, &perms, 0.5, Norm::L1).unwrap();
        let ck = Checkpoint::from_net(&small).unwrap();
        assert!(ck.is_compressed());
        assert_eq!(ck.get("conv2.weight").unwrap().dims.len(), 5);
        assert!(ck.to_net(shape(), &ACCEPTANCE_ARCH, None).is_err());
        assert_eq!(ck.to_net(shape(), &ACCEPTANCE_ARCH, Some(&plan)).unwrap(), small);
    }

    #[test]
    fn header_layout() {
        let ck = Checkpoint { tensors: vec![NamedTensor::new("ab", vec![2], vec![1.0, -2.0]).unwrap()] };
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let mut expected = b"SSZ1".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u16.to_le_bytes());
        expected.extend_from_slice(b"ab");
        expected.extend_from_slice(&[0, 1]);
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(Checkpoint::read_from(&b"SSZ2\0\0\0\0"[..]).is_err());
        assert!(Checkpoint::read_from(&b"SSZ1\x01\0\0\0"[..]).is_err());
        let ck = Checkpoint { tensors: vec![NamedTensor::new("x", vec![1], vec![1.0]).unwrap()] };
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        buf[11] = 7;
        assert!(Checkpoint::read_from(buf.as_slice()).is_err());
        assert!(NamedTensor::new("bad", vec![2, 2], vec![0.0; 3]).is_err());
        let net = MicroNet::acceptance(0);
        let mut ck = Checkpoint::from_net(&net).unwrap();
        ck.tensors.pop();
        assert!(ck.to_net(shape(), &ACCEPTANCE_ARCH, None).is_err());
    }
}
