//! Golden-vector conformance records.
//!
//! A golden file freezes constructed kernels so later builds can detect
//! numeric drift. The format is plain text, one record per case:
//!
//! ```text
//! case <name>
//! family <bilinear|triangle|gauss>
//! sizes <s0> [s1 [s2]]
//! m <kernel_count>
//! channels <c_out> <c_in_per_group>
//! w <values...>
//! p0 <values...>          one line per axis
//! s0 <values...>          one line per axis
//! kernel <values...>      row-major, c_out * c_in_per_group * grid entries
//! end
//! ```
//!
//! Values are written with 17 significant digits, enough to reproduce every
//! `f64` bit pattern exactly. Verification reconstructs each case's kernel
//! from the recorded parameters and compares entry by entry within
//! `1e-15 * max(1, |expected|)`.

use dcls_core::interp::{InterpFamily, InterpolationKind};
use dcls_core::kernelgen::{construct_kernel_inference, DclsGeometry, DclsParams};
use dcls_core::tensor::TensorND;
use std::fmt::Write as _;
use std::path::Path;

pub const GOLDEN_TOLERANCE: f64 = 1e-15;

#[derive(Debug, thiserror::Error)]
pub enum GoldenError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("case {case}: {msg}")]
    BadCase { case: String, msg: String },
}

/// One frozen construction: everything needed to rebuild and compare.
#[derive(Debug, Clone)]
pub struct GoldenCase {
    pub name: String,
    pub family: InterpFamily,
    pub geom: DclsGeometry,
    pub params: DclsParams<f64>,
    pub kernel: Vec<f64>,
}

/// First diverging kernel entry of a failed comparison.
#[derive(Debug, Clone)]
pub struct GoldenMismatch {
    pub case: String,
    pub index: usize,
    pub expected: f64,
    pub got: f64,
}

#[derive(Debug, Clone)]
pub struct GoldenReport {
    pub cases: usize,
    pub max_abs_err: f64,
    pub mismatch: Option<GoldenMismatch>,
}

impl GoldenReport {
    pub fn pass(&self) -> bool {
        self.mismatch.is_none()
    }
}

fn fmt_values(out: &mut String, tag: &str, values: &[f64]) {
    out.push_str(tag);
    for v in values {
        write!(out, " {v:.16e}").expect("write to string");
    }
    out.push('\n');
}

/// Serializes cases, constructing each kernel with the production
/// constructor. Used once per release to freeze expected values.
pub fn write_golden(path: &Path, cases: &[(String, InterpFamily, DclsGeometry, DclsParams<f64>)])
    -> Result<(), GoldenError>
{
    let mut out = String::new();
    out.push_str("# frozen dilated-kernel constructions, 17 significant digits per value\n");
    for (name, family, geom, params) in cases {
        let kind = InterpolationKind::of(*family);
        let constructed = construct_kernel_inference(params, geom, &kind)
            .map_err(|e| GoldenError::BadCase {
                case: name.clone(),
                msg: e.to_string(),
            })?;
        let (c_out, c_in_g, m) = params.channel_shape().map_err(|e| GoldenError::BadCase {
            case: name.clone(),
            msg: e.to_string(),
        })?;
        writeln!(out, "case {name}").unwrap();
        writeln!(out, "family {}", family.name()).unwrap();
        out.push_str("sizes");
        for s in geom.sizes() {
            write!(out, " {s}").unwrap();
        }
        out.push('\n');
        writeln!(out, "m {m}").unwrap();
        writeln!(out, "channels {c_out} {c_in_g}").unwrap();
        fmt_values(&mut out, "w", params.weights.data());
        for (a, p) in params.positions.iter().enumerate() {
            fmt_values(&mut out, &format!("p{a}"), p.data());
        }
        for (a, s) in params.sigmas.iter().enumerate() {
            fmt_values(&mut out, &format!("s{a}"), s.data());
        }
        fmt_values(&mut out, "kernel", constructed.kernel.data());
        out.push_str("end\n");
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn parse_f64s(line: usize, rest: &str) -> Result<Vec<f64>, GoldenError> {
    rest.split_whitespace()
        .map(|t| {
            t.parse::<f64>().map_err(|e| GoldenError::Parse {
                line,
                msg: format!("bad float {t:?}: {e}"),
            })
        })
        .collect()
}

/// Parses a golden file into cases without verifying them.
pub fn read_golden(path: &Path) -> Result<Vec<GoldenCase>, GoldenError> {
    let text = std::fs::read_to_string(path)?;
    let mut cases = Vec::new();

    struct Partial {
        name: String,
        family: Option<InterpFamily>,
        sizes: Vec<usize>,
        m: usize,
        channels: (usize, usize),
        w: Vec<f64>,
        p: Vec<Vec<f64>>,
        s: Vec<Vec<f64>>,
        kernel: Vec<f64>,
    }
    let mut cur: Option<Partial> = None;

    for (ln, raw) in text.lines().enumerate() {
        let line_no = ln + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (tag, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        let fail = |msg: String| GoldenError::Parse { line: line_no, msg };
        match tag {
            "case" => {
                if cur.is_some() {
                    return Err(fail("previous case not closed with 'end'".into()));
                }
                cur = Some(Partial {
                    name: rest.trim().to_string(),
                    family: None,
                    sizes: Vec::new(),
                    m: 0,
                    channels: (0, 0),
                    w: Vec::new(),
                    p: Vec::new(),
                    s: Vec::new(),
                    kernel: Vec::new(),
                });
            }
            "family" => {
                let c = cur.as_mut().ok_or_else(|| fail("family outside case".into()))?;
                c.family = Some(
                    InterpFamily::parse(rest)
                        .ok_or_else(|| fail(format!("unknown family {rest:?}")))?,
                );
            }
            "sizes" => {
                let c = cur.as_mut().ok_or_else(|| fail("sizes outside case".into()))?;
                c.sizes = rest
                    .split_whitespace()
                    .map(|t| t.parse::<usize>().map_err(|e| fail(format!("{e}"))))
                    .collect::<Result<_, _>>()?;
            }
            "m" => {
                let c = cur.as_mut().ok_or_else(|| fail("m outside case".into()))?;
                c.m = rest.trim().parse().map_err(|e| fail(format!("{e}")))?;
            }
            "channels" => {
                let c = cur.as_mut().ok_or_else(|| fail("channels outside case".into()))?;
                let parts: Vec<usize> = rest
                    .split_whitespace()
                    .map(|t| t.parse::<usize>().map_err(|e| fail(format!("{e}"))))
                    .collect::<Result<_, _>>()?;
                if parts.len() != 2 {
                    return Err(fail("channels needs two integers".into()));
                }
                c.channels = (parts[0], parts[1]);
            }
            "w" => {
                let c = cur.as_mut().ok_or_else(|| fail("w outside case".into()))?;
                c.w = parse_f64s(line_no, rest)?;
            }
            "kernel" => {
                let c = cur.as_mut().ok_or_else(|| fail("kernel outside case".into()))?;
                c.kernel = parse_f64s(line_no, rest)?;
            }
            "end" => {
                let c = cur.take().ok_or_else(|| fail("end outside case".into()))?;
                let family = c
                    .family
                    .ok_or_else(|| fail(format!("case {} missing family", c.name)))?;
                let geom = DclsGeometry::new(&c.sizes, c.m).map_err(|e| GoldenError::BadCase {
                    case: c.name.clone(),
                    msg: e.to_string(),
                })?;
                let shape = [c.channels.0, c.channels.1, c.m];
                let build = |v: Vec<f64>, what: &str| {
                    TensorND::from_vec(&shape, v).map_err(|e| GoldenError::BadCase {
                        case: c.name.clone(),
                        msg: format!("{what}: {e}"),
                    })
                };
                let params = DclsParams {
                    weights: build(c.w, "weights")?,
                    positions: c
                        .p
                        .into_iter()
                        .map(|v| build(v, "positions"))
                        .collect::<Result<_, _>>()?,
                    sigmas: c
                        .s
                        .into_iter()
                        .map(|v| build(v, "sigmas"))
                        .collect::<Result<_, _>>()?,
                };
                cases.push(GoldenCase {
                    name: c.name,
                    family,
                    geom,
                    params,
                    kernel: c.kernel,
                });
            }
            other => {
                let c = cur.as_mut().ok_or_else(|| fail(format!("{other:?} outside case")))?;
                if let Some(axis) = other.strip_prefix('p').and_then(|d| d.parse::<usize>().ok()) {
                    if axis != c.p.len() {
                        return Err(fail(format!("expected p{} next", c.p.len())));
                    }
                    c.p.push(parse_f64s(line_no, rest)?);
                } else if let Some(axis) =
                    other.strip_prefix('s').and_then(|d| d.parse::<usize>().ok())
                {
                    if axis != c.s.len() {
                        return Err(fail(format!("expected s{} next", c.s.len())));
                    }
                    c.s.push(parse_f64s(line_no, rest)?);
                } else {
                    return Err(fail(format!("unknown tag {other:?}")));
                }
            }
        }
    }
    if cur.is_some() {
        return Err(GoldenError::Parse {
            line: text.lines().count(),
            msg: "file ended inside a case".into(),
        });
    }
    Ok(cases)
}

/// Reconstructs every recorded case and compares against the frozen kernels.
pub fn golden_roundtrip(path: &Path) -> Result<GoldenReport, GoldenError> {
    let cases = read_golden(path)?;
    let mut report = GoldenReport {
        cases: cases.len(),
        max_abs_err: 0.0,
        mismatch: None,
    };
    for case in &cases {
        let kind = InterpolationKind::of(case.family);
        let constructed = construct_kernel_inference(&case.params, &case.geom, &kind)
            .map_err(|e| GoldenError::BadCase {
                case: case.name.clone(),
                msg: e.to_string(),
            })?;
        let got = constructed.kernel.data();
        if got.len() != case.kernel.len() {
            return Err(GoldenError::BadCase {
                case: case.name.clone(),
                msg: format!(
                    "kernel length {} does not match recorded {}",
                    got.len(),
                    case.kernel.len()
                ),
            });
        }
        for (i, (&e, &g)) in case.kernel.iter().zip(got.iter()).enumerate() {
            let err = (e - g).abs();
            report.max_abs_err = report.max_abs_err.max(err);
            if err > GOLDEN_TOLERANCE * e.abs().max(1.0) && report.mismatch.is_none() {
                report.mismatch = Some(GoldenMismatch {
                    case: case.name.clone(),
                    index: i,
                    expected: e,
                    got: g,
                });
            }
        }
    }
    Ok(report)
}
