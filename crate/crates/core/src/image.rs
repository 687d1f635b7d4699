//! Image containers and the raw on-disk bundle format.
//!
//! Every image is stored as a pair of files inside a bundle directory:
//! `<role>.f32` holds the samples as little-endian IEEE-754 `f32`, channel
//! planar and row-major within a channel; `<role>.txt` is a UTF-8 header of
//! `key=value` lines (`width`, `height`, `channels`, `dtype=f32le`, `role`,
//! `frame_id`). The rig travels alongside as `rig.txt`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{key_values, parse_floats, CameraRig, CameraRole, RigidTransform};
use crate::grid::Grid;

/// Dense multi-channel `f32` image, channel planar.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImagePlane {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::Arg(format!(
                "image dimensions must be positive, got {width}x{height}x{channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::Arg(format!(
                "image data has {} samples, expected {}",
                data.len(),
                width * height * channels
            )));
        }
        Ok(ImagePlane {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    /// Stacks `f64` grids as channels, rounding each sample to `f32`.
    pub fn from_grids(grids: &[Grid]) -> Result<Self> {
        let first = grids
            .first()
            .ok_or_else(|| Error::Arg("at least one channel required".into()))?;
        let (w, h) = first.dims();
        if grids.iter().any(|g| g.dims() != (w, h)) {
            return Err(Error::Arg("channel grids differ in size".into()));
        }
        let data = grids
            .iter()
            .flat_map(|g| g.data().iter().map(|&v| v as f32))
            .collect();
        Self::new(w, h, grids.len(), data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn channel_grid(&self, c: usize) -> Grid {
        Grid::from_vec(
            self.width,
            self.height,
            self.channel(c).iter().map(|&v| f64::from(v)).collect(),
        )
    }

    pub fn grids(&self) -> Vec<Grid> {
        (0..self.channels).map(|c| self.channel_grid(c)).collect()
    }

    fn check_finite(&self, role: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::Format(format!(
                "{role}: non-finite sample at index {i}"
            ))),
            None => Ok(()),
        }
    }
}

/// Single-channel metric depth; `NaN` marks invalid pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthField(pub ImagePlane);

impl DepthField {
    pub fn from_grid(grid: &Grid) -> Self {
        DepthField(ImagePlane::from_grids(std::slice::from_ref(grid)).expect("non-empty grid"))
    }

    pub fn to_grid(&self) -> Grid {
        self.0.channel_grid(0)
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        let d = self.0.get(0, x, y);
        d.is_finite() && d > 0.0
    }

    fn check(&self, role: &str) -> Result<()> {
        if self.0.channels != 1 {
            return Err(Error::Format(format!("{role}: depth must have one channel")));
        }
        if self.0.data.iter().any(|v| v.is_infinite()) {
            return Err(Error::Format(format!("{role}: infinite depth sample")));
        }
        Ok(())
    }
}

/// Intensities behind linear polarisers at 0, π/4, π/2 and 3π/4.
///
/// Four channels for a monochrome sensor; twelve for a colour sensor, stored
/// colour-major (all four angles of colour 0, then colour 1, then colour 2).
#[derive(Clone, Debug, PartialEq)]
pub struct PolarisationImage(pub ImagePlane);

impl PolarisationImage {
    pub fn new(plane: ImagePlane) -> Result<Self> {
        match plane.channels {
            4 | 12 => Ok(PolarisationImage(plane)),
            c => Err(Error::Arg(format!(
                "polarisation image needs 4 or 12 channels, got {c}"
            ))),
        }
    }

    pub fn colours(&self) -> usize {
        self.0.channels / 4
    }

    /// Four angle channels, averaged over colours.
    pub fn mono_grids(&self) -> Vec<Grid> {
        let colours = self.colours();
        (0..4)
            .map(|a| {
                let mut g = self.0.channel_grid(a);
                for c in 1..colours {
                    let other = self.0.channel_grid(c * 4 + a);
                    for (v, o) in g.data_mut().iter_mut().zip(other.data()) {
                        *v += o;
                    }
                }
                g.map(|v| v / colours as f64)
            })
            .collect()
    }
}

/// Four correlation buckets sampled at phase offsets 0, π/2, π, 3π/2.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationImage(pub ImagePlane);

impl CorrelationImage {
    pub fn new(plane: ImagePlane) -> Result<Self> {
        if plane.channels != 4 {
            return Err(Error::Arg(format!(
                "correlation image needs 4 channels, got {}",
                plane.channels
            )));
        }
        Ok(CorrelationImage(plane))
    }
}

/// One synchronized capture of the four-camera rig.
///
/// `struct_depth` and `gt_depth` are registered to the left polarisation
/// camera.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameBundle {
    pub pol_left: PolarisationImage,
    pub pol_right: PolarisationImage,
    pub corr: CorrelationImage,
    pub struct_depth: Option<DepthField>,
    pub gt_depth: Option<DepthField>,
    pub rig: CameraRig,
    pub frame_id: u64,
    /// Further left-camera views with known poses, for temporal losses.
    pub temporal: Vec<TemporalFrame>,
}

/// A left-camera image taken from another pose. `pose` maps the reference
/// left-camera frame into this view's camera frame.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalFrame {
    pub image: PolarisationImage,
    pub pose: RigidTransform,
}

impl FrameBundle {
    /// Checks every image against the resolution its camera declares.
    pub fn validate(&self) -> Result<()> {
        let check = |role: &str, cam: CameraRole, w: usize, h: usize| -> Result<()> {
            let c = self.rig.camera(cam);
            if (c.width, c.height) != (w, h) {
                return Err(Error::Format(format!(
                    "{role} is {w}x{h} but camera {} declares {}x{}",
                    cam.as_str(),
                    c.width,
                    c.height
                )));
            }
            Ok(())
        };
        check(
            "pol_left",
            CameraRole::PolLeft,
            self.pol_left.0.width,
            self.pol_left.0.height,
        )?;
        check(
            "pol_right",
            CameraRole::PolRight,
            self.pol_right.0.width,
            self.pol_right.0.height,
        )?;
        check("corr", CameraRole::Itof, self.corr.0.width, self.corr.0.height)?;
        for (role, d) in [("struct_depth", &self.struct_depth), ("gt_depth", &self.gt_depth)] {
            if let Some(d) = d {
                check(role, CameraRole::PolLeft, d.width(), d.height())?;
            }
        }
        for t in &self.temporal {
            check("temporal", CameraRole::PolLeft, t.image.0.width, t.image.0.height)?;
        }
        Ok(())
    }
}

fn header_text(plane: &ImagePlane, role: &str, frame_id: u64) -> String {
    format!(
        "width={}\nheight={}\nchannels={}\ndtype=f32le\nrole={}\nframe_id={}\n",
        plane.width, plane.height, plane.channels, role, frame_id
    )
}

/// Writes one image as `<role>.f32` plus `<role>.txt` into `dir`.
pub fn write_image(dir: &Path, role: &str, plane: &ImagePlane, frame_id: u64) -> Result<()> {
    let hdr = dir.join(format!("{role}.txt"));
    fs::write(&hdr, header_text(plane, role, frame_id)).map_err(|e| Error::io(&hdr, e))?;
    let raw = dir.join(format!("{role}.f32"));
    let mut bytes = Vec::with_capacity(plane.data.len() * 4);
    for v in &plane.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))
}

struct Header {
    width: usize,
    height: usize,
    channels: usize,
    frame_id: u64,
}

fn parse_header(text: &str, role: &str) -> Result<Header> {
    let mut kv = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Format(format!("{role}.txt line {}: expected key=value", i + 1))
        })?;
        if kv.insert(k.trim(), v.trim()).is_some() {
            return Err(Error::Format(format!("{role}.txt: duplicate key {k}")));
        }
    }
    let field = |k: &str| {
        kv.get(k)
            .copied()
            .ok_or_else(|| Error::Format(format!("{role}.txt: missing key {k}")))
    };
    let number = |k: &str| -> Result<usize> {
        field(k)?
            .parse::<usize>()
            .map_err(|_| Error::Format(format!("{role}.txt: {k} is not a count")))
    };
    let header = Header {
        width: number("width")?,
        height: number("height")?,
        channels: number("channels")?,
        frame_id: field("frame_id")?
            .parse()
            .map_err(|_| Error::Format(format!("{role}.txt: bad frame_id")))?,
    };
    if field("dtype")? != "f32le" {
        return Err(Error::Format(format!("{role}.txt: dtype must be f32le")));
    }
    if field("role")? != role {
        return Err(Error::Format(format!("{role}.txt: role mismatch")));
    }
    if header.width == 0 || header.height == 0 || header.channels == 0 {
        return Err(Error::Format(format!("{role}.txt: zero dimension")));
    }
    Ok(header)
}

/// Reads `<role>.txt` and `<role>.f32`; returns the image and its frame id.
pub fn read_image(dir: &Path, role: &str) -> Result<(ImagePlane, u64)> {
    let hdr_path = dir.join(format!("{role}.txt"));
    let text = fs::read_to_string(&hdr_path).map_err(|e| Error::io(&hdr_path, e))?;
    let header = parse_header(&text, role)?;
    let raw_path = dir.join(format!("{role}.f32"));
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let expected = header.width * header.height * header.channels * 4;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{role}.f32 has {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let plane = ImagePlane::new(header.width, header.height, header.channels, data)?;
    Ok((plane, header.frame_id))
}

/// Writes all present images of `bundle` and its rig into `dir`.
pub fn write_bundle(bundle: &FrameBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let id = bundle.frame_id;
    write_image(dir, "pol_left", &bundle.pol_left.0, id)?;
    write_image(dir, "pol_right", &bundle.pol_right.0, id)?;
    write_image(dir, "corr", &bundle.corr.0, id)?;
    if let Some(d) = &bundle.struct_depth {
        write_image(dir, "struct_depth", &d.0, id)?;
    }
    if let Some(d) = &bundle.gt_depth {
        write_image(dir, "gt_depth", &d.0, id)?;
    }
    if !bundle.temporal.is_empty() {
        let mut poses = String::new();
        for (k, t) in bundle.temporal.iter().enumerate() {
            write_image(dir, &format!("temporal_{k}"), &t.image.0, id)?;
            poses.push_str(&pose_line(k, &t.pose));
        }
        let p = dir.join("temporal_poses.txt");
        fs::write(&p, poses).map_err(|e| Error::io(&p, e))?;
    }
    let rig_path = dir.join("rig.txt");
    fs::write(&rig_path, bundle.rig.to_text()).map_err(|e| Error::io(&rig_path, e))
}

fn pose_line(k: usize, t: &RigidTransform) -> String {
    let r = &t.rotation;
    let rot: Vec<String> = (0..3)
        .flat_map(|i| (0..3).map(move |j| format!("{:e}", r[(i, j)])))
        .collect();
    let tr: Vec<String> = t.translation.iter().map(|v| format!("{v:e}")).collect();
    format!("view={k} rotation={} translation={}\n", rot.join(","), tr.join(","))
}

fn parse_poses(text: &str) -> Result<Vec<RigidTransform>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let kv = key_values(line, line_no)?;
        if kv.is_empty() {
            continue;
        }
        let (mut view, mut rot, mut tr) = (None, None, None);
        for (col, k, v) in kv {
            match k {
                "view" => {
                    view = Some(v.parse::<usize>().map_err(|_| Error::Parse {
                        line: line_no,
                        column: col,
                        message: format!("bad view index {v:?}"),
                    })?)
                }
                "rotation" => rot = Some(parse_floats(v, 9, line_no, col)?),
                "translation" => tr = Some(parse_floats(v, 3, line_no, col)?),
                _ => {
                    return Err(Error::Parse {
                        line: line_no,
                        column: col,
                        message: format!("unknown key {k:?}"),
                    })
                }
            }
        }
        let missing = |what: &str| Error::Parse {
            line: line_no,
            column: 1,
            message: format!("missing {what}"),
        };
        let view = view.ok_or_else(|| missing("view"))?;
        let rot = rot.ok_or_else(|| missing("rotation"))?;
        let tr = tr.ok_or_else(|| missing("translation"))?;
        if view != out.len() {
            return Err(Error::Parse {
                line: line_no,
                column: 1,
                message: format!("expected view {}", out.len()),
            });
        }
        let pose = RigidTransform::new(
            nalgebra::Matrix3::from_row_slice(&rot),
            nalgebra::Vector3::new(tr[0], tr[1], tr[2]),
        )
        .map_err(|e| Error::Parse {
            line: line_no,
            column: 1,
            message: e.to_string(),
        })?;
        out.push(pose);
    }
    Ok(out)
}

/// Reads a bundle written by [`write_bundle`].
pub fn read_bundle(dir: &Path) -> Result<FrameBundle> {
    let rig_path = dir.join("rig.txt");
    let rig_text = fs::read_to_string(&rig_path).map_err(|e| Error::io(&rig_path, e))?;
    let rig = CameraRig::parse(&rig_text)?;

    let (pol_left, frame_id) = read_image(dir, "pol_left")?;
    let mut ids = vec![frame_id];
    let mut required = |role: &str| -> Result<ImagePlane> {
        let (plane, id) = read_image(dir, role)?;
        plane.check_finite(role)?;
        ids.push(id);
        Ok(plane)
    };
    pol_left.check_finite("pol_left")?;
    let pol_right = required("pol_right")?;
    let corr = required("corr")?;

    let mut optional = |role: &str| -> Result<Option<DepthField>> {
        if !dir.join(format!("{role}.txt")).exists() {
            return Ok(None);
        }
        let (plane, id) = read_image(dir, role)?;
        ids.push(id);
        let d = DepthField(plane);
        d.check(role)?;
        Ok(Some(d))
    };
    let struct_depth = optional("struct_depth")?;
    let gt_depth = optional("gt_depth")?;

    let mut temporal = Vec::new();
    let poses_path = dir.join("temporal_poses.txt");
    if poses_path.exists() {
        let text = fs::read_to_string(&poses_path).map_err(|e| Error::io(&poses_path, e))?;
        for (k, pose) in parse_poses(&text)?.into_iter().enumerate() {
            let (plane, id) = read_image(dir, &format!("temporal_{k}"))?;
            plane.check_finite("temporal")?;
            ids.push(id);
            temporal.push(TemporalFrame {
                image: PolarisationImage::new(plane).map_err(|e| Error::Format(e.to_string()))?,
                pose,
            });
        }
    }

    if ids.iter().any(|&i| i != frame_id) {
        return Err(Error::Format("headers disagree on frame_id".into()));
    }

    let bundle = FrameBundle {
        pol_left: PolarisationImage::new(pol_left).map_err(|e| Error::Format(e.to_string()))?,
        pol_right: PolarisationImage::new(pol_right).map_err(|e| Error::Format(e.to_string()))?,
        corr: CorrelationImage::new(corr).map_err(|e| Error::Format(e.to_string()))?,
        struct_depth,
        gt_depth,
        rig,
        frame_id,
        temporal,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Maps one channel to 8-bit grey: `round(255 * clamp((v - lo) / (hi - lo), 0, 1))`,
/// halves rounding up. Non-finite samples map to 0.
pub fn export_png(img: &ImagePlane, channel: usize, range: (f64, f64)) -> Result<Vec<u8>> {
    let (lo, hi) = range;
    if channel >= img.channels {
        return Err(Error::Arg(format!(
            "channel {channel} out of range for {}-channel image",
            img.channels
        )));
    }
    if !(lo < hi) {
        return Err(Error::Arg(format!("empty range [{lo}, {hi}]")));
    }
    let pixels: Vec<u8> = img
        .channel(channel)
        .iter()
        .map(|&v| {
            let v = f64::from(v);
            if !v.is_finite() {
                return 0;
            }
            let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
            (255.0 * t + 0.5).floor() as u8
        })
        .collect();

    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::Format(format!("png: {e}")))?;
        writer
            .write_image_data(&pixels)
            .map_err(|e| Error::Format(format!("png: {e}")))?;
    }
    Ok(out)
}

/// Nearest-rank percentile (`q` in `[0, 1]`) of the finite values.
pub fn percentile<'a>(values: impl IntoIterator<Item = &'a f64>, q: f64) -> Option<f64> {
    let mut v: Vec<f64> = values.into_iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Some(v[rank - 1])
}
