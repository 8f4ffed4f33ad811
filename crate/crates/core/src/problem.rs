//! Convolution problem descriptors in the benchdnn string style
//! (`MB1_IC64IH56_OC64OH56_KH3PH1`), shape inference, FLOP counting and the
//! ResNet50v1.5 convolution-layer suite.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The 3×3 ResNet50v1.5 layer used throughout the benchmarks.
pub const FEATURED_DESCRIPTOR: &str = "MB1_IC64IH56_OC64OH56_KH3PH1";

const KEYS: [&str; 13] = [
    "MB", "IC", "IH", "IW", "OC", "OH", "OW", "KH", "KW", "SH", "SW", "PH", "PW",
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DescriptorError {
    #[error("unknown key '{0}'")]
    UnknownKey(String),
    #[error("duplicate key '{0}'")]
    DuplicateKey(String),
    #[error("key '{0}' has no value")]
    MissingValue(String),
    #[error("value '{value}' for key '{key}' is not a valid integer")]
    BadValue { key: String, value: String },
    #[error("unexpected character '{ch}' at offset {offset}")]
    UnexpectedChar { ch: char, offset: usize },
    #[error("missing required key '{0}'")]
    MissingKey(&'static str),
    #[error("'{0}' must be positive")]
    NonPositive(&'static str),
    #[error("shape violation: {key}={given} but the shape formula gives {expected}")]
    ShapeViolation {
        key: &'static str,
        given: usize,
        expected: usize,
    },
    #[error("kernel {key}={kernel} exceeds the padded input extent {padded}")]
    KernelTooLarge {
        key: &'static str,
        kernel: usize,
        padded: usize,
    },
}

/// Full convolution shape. Spatial padding is symmetric zero padding.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvProblem {
    pub mb: usize,
    pub ic: usize,
    pub ih: usize,
    pub iw: usize,
    pub oc: usize,
    pub oh: usize,
    pub ow: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

/// `floor((input + 2·pad − kernel) / stride) + 1`, or `None` when the kernel
/// does not fit in the padded input.
pub fn output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if kernel > padded || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl ConvProblem {
    /// Square-input, square-kernel problem with the output shape inferred.
    pub fn square(
        mb: usize,
        ic: usize,
        ih: usize,
        oc: usize,
        kh: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self, DescriptorError> {
        let oh = output_extent(ih, kh, stride, pad).ok_or(DescriptorError::KernelTooLarge {
            key: "KH",
            kernel: kh,
            padded: ih + 2 * pad,
        })?;
        let p = ConvProblem {
            mb,
            ic,
            ih,
            iw: ih,
            oc,
            oh,
            ow: oh,
            kh,
            kw: kh,
            sh: stride,
            sw: stride,
            ph: pad,
            pw: pad,
            name: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn validate(&self) -> Result<(), DescriptorError> {
        for (key, v) in [
            ("MB", self.mb),
            ("IC", self.ic),
            ("IH", self.ih),
            ("IW", self.iw),
            ("OC", self.oc),
            ("OH", self.oh),
            ("OW", self.ow),
            ("KH", self.kh),
            ("KW", self.kw),
            ("SH", self.sh),
            ("SW", self.sw),
        ] {
            if v == 0 {
                return Err(DescriptorError::NonPositive(key));
            }
        }
        for (kkey, okey, input, kernel, stride, pad, given) in [
            ("KH", "OH", self.ih, self.kh, self.sh, self.ph, self.oh),
            ("KW", "OW", self.iw, self.kw, self.sw, self.pw, self.ow),
        ] {
            let expected = output_extent(input, kernel, stride, pad).ok_or(
                DescriptorError::KernelTooLarge {
                    key: kkey,
                    kernel,
                    padded: input + 2 * pad,
                },
            )?;
            if expected != given {
                return Err(DescriptorError::ShapeViolation {
                    key: okey,
                    given,
                    expected,
                });
            }
        }
        Ok(())
    }

    pub fn src_dims(&self) -> [usize; 4] {
        [self.mb, self.ic, self.ih, self.iw]
    }

    pub fn wei_dims(&self) -> [usize; 4] {
        [self.oc, self.ic, self.kh, self.kw]
    }

    pub fn dst_dims(&self) -> [usize; 4] {
        [self.mb, self.oc, self.oh, self.ow]
    }

    /// Multiply-add accounting: `2·MB·OC·OH·OW·IC·KH·KW`.
    pub fn flops(&self) -> u64 {
        2 * self.macs()
    }

    /// Multiply-accumulate count of the direct formulation.
    pub fn macs(&self) -> u64 {
        [self.mb, self.oc, self.oh, self.ow, self.ic, self.kh, self.kw]
            .iter()
            .map(|&v| v as u64)
            .product()
    }

    pub fn descriptor(&self) -> String {
        format_descriptor(self)
    }

    /// Name if present, otherwise the canonical descriptor.
    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.descriptor())
    }
}

impl fmt::Display for ConvProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_descriptor(self))
    }
}

impl std::str::FromStr for ConvProblem {
    type Err = DescriptorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_descriptor(s)
    }
}

/// Parses `KEY<int>` tokens, optionally separated by underscores, in any
/// order. Keys are case-sensitive and may not repeat.
pub fn parse_descriptor(s: &str) -> Result<ConvProblem, DescriptorError> {
    let mut values: [Option<usize>; 13] = [None; 13];
    let bytes = s.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c == b'_' {
            i += 1;
            continue;
        }
        if !c.is_ascii_alphabetic() {
            let ch = s[i..].chars().next().unwrap_or('?');
            return Err(DescriptorError::UnexpectedChar { ch, offset: i });
        }
        let key_start = i;
        while i < bytes.len() && bytes[i].is_ascii_alphabetic() {
            i += 1;
        }
        let key = &s[key_start..i];
        let slot = KEYS
            .iter()
            .position(|&k| k == key)
            .ok_or_else(|| DescriptorError::UnknownKey(key.to_string()))?;
        let val_start = i;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        if val_start == i {
            return Err(DescriptorError::MissingValue(key.to_string()));
        }
        let raw = &s[val_start..i];
        let v: usize = raw.parse().map_err(|_| DescriptorError::BadValue {
            key: key.to_string(),
            value: raw.to_string(),
        })?;
        if values[slot].replace(v).is_some() {
            return Err(DescriptorError::DuplicateKey(key.to_string()));
        }
    }

    let [mb, ic, ih, iw, oc, oh, ow, kh, kw, sh, sw, ph, pw] = values;
    let ic = ic.ok_or(DescriptorError::MissingKey("IC"))?;
    let ih = ih.ok_or(DescriptorError::MissingKey("IH"))?;
    let oc = oc.ok_or(DescriptorError::MissingKey("OC"))?;
    let kh = kh.ok_or(DescriptorError::MissingKey("KH"))?;
    let mb = mb.unwrap_or(1);
    let iw = iw.unwrap_or(ih);
    let kw = kw.unwrap_or(kh);
    let sh = sh.unwrap_or(1);
    let sw = sw.unwrap_or(sh);
    let ph = ph.unwrap_or(0);
    let pw = pw.unwrap_or(ph);

    for (key, v) in [
        ("MB", mb),
        ("IC", ic),
        ("IH", ih),
        ("IW", iw),
        ("OC", oc),
        ("KH", kh),
        ("KW", kw),
        ("SH", sh),
        ("SW", sw),
    ] {
        if v == 0 {
            return Err(DescriptorError::NonPositive(key));
        }
    }
    let infer = |kkey, input, kernel, stride, pad| {
        output_extent(input, kernel, stride, pad).ok_or(DescriptorError::KernelTooLarge {
            key: kkey,
            kernel,
            padded: input + 2 * pad,
        })
    };
    let oh_expected = infer("KH", ih, kh, sh, ph)?;
    let ow_expected = infer("KW", iw, kw, sw, pw)?;
    let p = ConvProblem {
        mb,
        ic,
        ih,
        iw,
        oc,
        oh: oh.unwrap_or(oh_expected),
        ow: ow.unwrap_or(ow_expected),
        kh,
        kw,
        sh,
        sw,
        ph,
        pw,
        name: None,
    };
    p.validate()?;
    Ok(p)
}

/// Canonical descriptor: fixed key order grouped as batch / input / output /
/// kernel. `MB`, `IC`, `IH`, `OC`, `OH` and `KH` are always written; the
/// remaining keys only when they differ from what the parser would default.
pub fn format_descriptor(p: &ConvProblem) -> String {
    let mut out = format!("MB{}_IC{}IH{}", p.mb, p.ic, p.ih);
    if p.iw != p.ih {
        out.push_str(&format!("IW{}", p.iw));
    }
    out.push_str(&format!("_OC{}OH{}", p.oc, p.oh));
    if p.ow != p.oh {
        out.push_str(&format!("OW{}", p.ow));
    }
    out.push_str(&format!("_KH{}", p.kh));
    if p.kw != p.kh {
        out.push_str(&format!("KW{}", p.kw));
    }
    if p.sh != 1 {
        out.push_str(&format!("SH{}", p.sh));
    }
    if p.sw != p.sh {
        out.push_str(&format!("SW{}", p.sw));
    }
    if p.ph != 0 {
        out.push_str(&format!("PH{}", p.ph));
    }
    if p.pw != p.ph {
        out.push_str(&format!("PW{}", p.pw));
    }
    out
}

pub fn flops(p: &ConvProblem) -> u64 {
    p.flops()
}

/// The 53 convolution layers of ResNet50v1.5 at MB=1 with a 224×224 input,
/// in network order. Stride-2 downsampling sits on the 3×3 convolution of
/// each stage's first bottleneck (the v1.5 variant).
pub fn resnet50_conv_suite() -> Vec<ConvProblem> {
    let conv = |name: String, ic, ih, oc, k, s, pad| {
        ConvProblem::square(1, ic, ih, oc, k, s, pad)
            .expect("suite layers are well formed")
            .with_name(name)
    };
    let mut layers = vec![conv("conv1".into(), 3, 224, 64, 7, 2, 3)];

    // (stage, blocks, bottleneck width, input extent of the stage, input channels)
    let stages = [
        (2, 3, 64, 56, 64),
        (3, 4, 128, 56, 256),
        (4, 6, 256, 28, 512),
        (5, 3, 512, 14, 1024),
    ];
    for (stage, blocks, width, in_extent, in_ch) in stages {
        let out_ch = width * 4;
        // conv2_x follows the max-pool and keeps its resolution.
        let first_stride = if stage == 2 { 1 } else { 2 };
        let out_extent = in_extent / first_stride;
        for b in 0..blocks {
            let tag = (b'a' + b as u8) as char;
            let name = |branch: &str| format!("res{stage}{tag}_{branch}");
            if b == 0 {
                layers.push(conv(name("branch2a"), in_ch, in_extent, width, 1, 1, 0));
                let mut mid = conv(name("branch2b"), width, in_extent, width, 3, first_stride, 1);
                if stage == 2 {
                    mid.name = Some(format!("{} (most expensive 3x3)", mid.name.unwrap()));
                }
                layers.push(mid);
                layers.push(conv(name("branch2c"), width, out_extent, out_ch, 1, 1, 0));
                layers.push(conv(name("branch1"), in_ch, in_extent, out_ch, 1, first_stride, 0));
            } else {
                layers.push(conv(name("branch2a"), out_ch, out_extent, width, 1, 1, 0));
                layers.push(conv(name("branch2b"), width, out_extent, width, 3, 1, 1));
                layers.push(conv(name("branch2c"), width, out_extent, out_ch, 1, 1, 0));
            }
        }
    }
    layers
}

/// The suite's canonical descriptors as a JSON array.
pub fn suite_json() -> String {
    let descs: Vec<String> = resnet50_conv_suite().iter().map(format_descriptor).collect();
    serde_json::to_string_pretty(&descs).expect("strings serialize")
}

pub fn featured_layer() -> ConvProblem {
    resnet50_conv_suite()
        .into_iter()
        .find(|p| p.name.as_deref().is_some_and(|n| n.contains("most expensive")))
        .expect("featured layer is part of the suite")
}
