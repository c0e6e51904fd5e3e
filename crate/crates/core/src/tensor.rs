//! Dense row-major tensors and their binary file format.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! "TNSR" | version: u8 | dtype: u8 (0 = f32) | ndim: u8 | ndim x u32 dims | f32 payload
//! ```

use std::fmt::Debug;
use std::fs;
use std::io::{Read, Write};
use std::iter::Sum;
use std::path::Path;

use num_traits::Float;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const FORMAT_VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;

/// Floating-point element type. Training runs in `f32`; gradient checks
/// instantiate the same code with `f64`.
pub trait Scalar: Float + Default + Debug + Sum + Send + Sync + 'static {
    /// `c <- alpha * a * b + beta * c` with arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn of(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("finite cast")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite cast")
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(span(m, k, rsa, csa) <= a.len(), "gemm: lhs too short");
                assert!(span(k, n, rsb, csb) <= b.len(), "gemm: rhs too short");
                assert!(span(m, n, rsc, csc) <= c.len(), "gemm: output too short");
                // SAFETY: the asserts above bound every index the kernel touches.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if let Some(axis) = shape.iter().position(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("dimension {axis} is zero")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {shape:?} needs {expected} elements, got {}",
                    data.len()
                ),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Size of axis `axis`.
    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Contiguous slice for index `i` along the leading axis.
    pub fn row(&self, i: usize) -> &[T] {
        let stride = self.data.len() / self.shape[0];
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let stride = self.data.len() / self.shape[0];
        &mut self.data[i * stride..(i + 1) * stride]
    }

    /// Sub-tensor of leading-axis entries `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.shape[0] {
            return Err(Error::shape(
                "slice_rows",
                format!("range {start}..{end} outside axis 0 of size {}", self.shape[0]),
            ));
        }
        let stride = self.data.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self {
            shape,
            data: self.data[start * stride..end * stride].to_vec(),
        })
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack", "no tensors to stack"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for (i, t) in items.iter().enumerate() {
            if t.shape != first.shape {
                return Err(Error::shape(
                    "stack",
                    format!("item {i} has shape {:?}, expected {:?}", t.shape, first.shape),
                ));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|v| *v = *v * s);
    }

    /// `self += other`, shapes must agree.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "add_assign",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn norm_sq(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }
}

impl Tensor<f32> {
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        if self.shape.len() > u8::MAX as usize {
            return Err(Error::shape("tensor file", "more than 255 dimensions"));
        }
        let mut buf = Vec::with_capacity(7 + 4 * self.shape.len() + 4 * self.data.len());
        buf.extend_from_slice(MAGIC);
        buf.push(FORMAT_VERSION);
        buf.push(DTYPE_F32);
        buf.push(self.shape.len() as u8);
        for &d in &self.shape {
            let d = u32::try_from(d)
                .map_err(|_| Error::shape("tensor file", format!("dimension {d} exceeds u32")))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("in-memory write");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |offset: usize, reason: &str| Error::Format {
            offset: offset as u64,
            reason: reason.to_string(),
        };
        if bytes.len() < 7 {
            return Err(fail(0, "truncated tensor header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(fail(0, "bad magic, expected TNSR"));
        }
        if bytes[4] != FORMAT_VERSION {
            return Err(fail(4, &format!("unsupported version {}", bytes[4])));
        }
        if bytes[5] != DTYPE_F32 {
            return Err(fail(5, &format!("unsupported dtype {}", bytes[5])));
        }
        let ndim = bytes[6] as usize;
        let header = 7 + 4 * ndim;
        if bytes.len() < header {
            return Err(fail(7, "truncated dimension list"));
        }
        let shape: Vec<usize> = bytes[7..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        let n: usize = shape.iter().product();
        if bytes.len() != header + 4 * n {
            return Err(fail(
                header,
                &format!(
                    "payload holds {} bytes, shape {shape:?} needs {}",
                    bytes.len() - header,
                    4 * n
                ),
            ));
        }
        let data = bytes[header..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(shape, data)
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
