//! Formula rendering.
//!
//! Two backends sit behind one contract: an external command template (for a
//! real TeX toolchain) and a built-in stub rasterizer that draws one
//! deterministic glyph per token, so datasets and tests never need TeX. Both
//! produce a tightly cropped grayscale-on-white PNG with a fixed 8 px white
//! margin whose scale grows with the requested DPI.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::latex_norm::NormalizedLatex;

const MARGIN_PX: u32 = 8;
const GLYPH_ROWS: i32 = 7;
const GLYPH_COLS: i32 = 5;

#[derive(Debug, Error)]
pub enum RenderError {
    /// The sample cannot be rendered; callers discard it and log.
    #[error("formula failed to compile: {0}")]
    CompileFailure(String),
    /// The rendering backend itself is unusable; callers abort the build.
    #[error("renderer unavailable: {0}")]
    RendererUnavailable(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image encode failed: {0}")]
    Image(#[from] image::ImageError),
}

/// Rendering backend. The command template receives `{latex_file}`
/// `{out_png}` `{dpi}` `{font}` placeholders and must exit 0 on success.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Renderer {
    Stub,
    Command(String),
}

impl Renderer {
    /// Parses a CLI flag value: `stub` or `command:<template>`.
    pub fn parse(spec: &str) -> Result<Self, RenderError> {
        if spec == "stub" {
            Ok(Renderer::Stub)
        } else if let Some(tpl) = spec.strip_prefix("command:") {
            if tpl.trim().is_empty() {
                return Err(RenderError::RendererUnavailable(
                    "empty command template".into(),
                ));
            }
            Ok(Renderer::Command(tpl.to_string()))
        } else {
            Err(RenderError::RendererUnavailable(format!(
                "unknown renderer {spec:?}; expected \"stub\" or \"command:<template>\""
            )))
        }
    }
}

/// Cache/scratch directory: `MATHREC_CACHE_DIR` if set, else the system
/// temp directory.
pub fn cache_dir() -> PathBuf {
    std::env::var_os("MATHREC_CACHE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(std::env::temp_dir)
}

/// Renders `latex` to `out_png`. Identical `(latex, font, dpi)` triples
/// produce byte-identical files under the stub backend.
pub fn render_formula(
    renderer: &Renderer,
    latex: &NormalizedLatex,
    font: &str,
    dpi: u32,
    out_png: &Path,
) -> Result<(), RenderError> {
    match renderer {
        Renderer::Stub => render_stub(latex, font, dpi, out_png),
        Renderer::Command(template) => render_command(template, latex, font, dpi, out_png),
    }
}

fn render_command(
    template: &str,
    latex: &NormalizedLatex,
    font: &str,
    dpi: u32,
    out_png: &Path,
) -> Result<(), RenderError> {
    let scratch = cache_dir();
    std::fs::create_dir_all(&scratch)?;
    let latex_file = scratch.join(format!(
        "formula-{:016x}.tex",
        fnv1a(&[latex.as_str().as_bytes(), font.as_bytes(), &dpi.to_le_bytes()])
    ));
    std::fs::write(&latex_file, latex.as_str())?;
    let parts: Vec<String> = template
        .split_whitespace()
        .map(|p| {
            p.replace("{latex_file}", &latex_file.to_string_lossy())
                .replace("{out_png}", &out_png.to_string_lossy())
                .replace("{dpi}", &dpi.to_string())
                .replace("{font}", font)
        })
        .collect();
    let (program, args) = parts
        .split_first()
        .ok_or_else(|| RenderError::RendererUnavailable("empty command template".into()))?;
    let status = Command::new(program).args(args).status().map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            RenderError::RendererUnavailable(format!("command {program:?} not found"))
        } else {
            RenderError::RendererUnavailable(format!("failed to spawn {program:?}: {e}"))
        }
    })?;
    let _ = std::fs::remove_file(&latex_file);
    if !status.success() {
        return Err(RenderError::CompileFailure(format!(
            "renderer exited with {status} for {:?}",
            latex.as_str()
        )));
    }
    if !out_png.exists() {
        return Err(RenderError::CompileFailure(format!(
            "renderer produced no output for {:?}",
            latex.as_str()
        )));
    }
    Ok(())
}

fn fnv1a(chunks: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for chunk in chunks {
        for &b in *chunk {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Commands the stub backend can typeset. Anything else is a compile
/// failure, mirroring how a real TeX run rejects unknown macros.
const KNOWN_COMMANDS: &[&str] = &[
    "\\frac", "\\sqrt", "\\binom", "\\overset", "\\underset", "\\stackrel", "\\sum", "\\prod",
    "\\int", "\\oint", "\\lim", "\\log", "\\ln", "\\exp", "\\sin", "\\cos", "\\tan", "\\cot",
    "\\min", "\\max", "\\alpha", "\\beta", "\\gamma", "\\delta", "\\epsilon", "\\zeta", "\\eta",
    "\\theta", "\\iota", "\\kappa", "\\lambda", "\\mu", "\\nu", "\\xi", "\\pi", "\\rho",
    "\\sigma", "\\tau", "\\upsilon", "\\phi", "\\chi", "\\psi", "\\omega", "\\Gamma", "\\Delta",
    "\\Theta", "\\Lambda", "\\Xi", "\\Pi", "\\Sigma", "\\Upsilon", "\\Phi", "\\Psi", "\\Omega",
    "\\leq", "\\geq", "\\neq", "\\pm", "\\mp", "\\times", "\\div", "\\cdot", "\\circ", "\\bullet",
    "\\infty", "\\partial", "\\nabla", "\\in", "\\notin", "\\subset", "\\supset", "\\subseteq",
    "\\supseteq", "\\cup", "\\cap", "\\wedge", "\\vee", "\\neg", "\\forall", "\\exists",
    "\\rightarrow", "\\leftarrow", "\\Rightarrow", "\\Leftarrow", "\\Leftrightarrow", "\\mapsto",
    "\\equiv", "\\approx", "\\sim", "\\simeq", "\\propto", "\\ldots", "\\cdots", "\\vdots",
    "\\hat", "\\bar", "\\vec", "\\tilde", "\\dot", "\\ddot", "\\overline", "\\underline",
    "\\widehat", "\\widetilde", "\\mathbf", "\\mathrm", "\\mathcal", "\\mathbb", "\\mathit",
    "\\mathsf", "\\boldsymbol", "\\operatorname", "\\text", "\\prime", "\\emptyset", "\\angle",
    "\\perp", "\\parallel", "\\left", "\\right", "\\{", "\\}", "\\|", "\\,", "\\;", "\\!",
    "\\quad", "\\qquad", "\\%", "\\&", "\\#", "\\_",
];

struct Glyph {
    bitmap: [[bool; GLYPH_COLS as usize]; GLYPH_ROWS as usize],
}

fn glyph_for(token: &str, font: &str) -> Glyph {
    let seed = fnv1a(&[font.as_bytes(), token.as_bytes()]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bitmap = [[false; GLYPH_COLS as usize]; GLYPH_ROWS as usize];
    let mut set = 0;
    for row in bitmap.iter_mut() {
        for cell in row.iter_mut() {
            *cell = rng.gen_bool(0.45);
            set += usize::from(*cell);
        }
    }
    // degenerate glyphs would be invisible; stamp a diagonal
    if set < 8 {
        for i in 0..GLYPH_ROWS.min(GLYPH_COLS) as usize {
            bitmap[i][i] = true;
        }
    }
    Glyph { bitmap }
}

/// Token placements in glyph-cell coordinates before scaling.
fn layout(tokens: &[&str]) -> Vec<(i32, i32, String)> {
    let mut placed = Vec::new();
    let mut x = 0i32;
    let mut offset = 0i32; // vertical offset in cells
    let mut stack: Vec<i32> = Vec::new();
    let mut pending: Option<i32> = None;
    for &tok in tokens {
        match tok {
            "{" => {
                stack.push(offset);
                if let Some(delta) = pending.take() {
                    offset += delta;
                }
            }
            "}" => {
                offset = stack.pop().unwrap_or(0);
            }
            "^" => {
                pending = Some(-(GLYPH_ROWS / 2 + 1));
            }
            "_" => {
                pending = Some(GLYPH_ROWS / 2 + 1);
            }
            _ => {
                let this_offset = match pending.take() {
                    Some(delta) => offset + delta,
                    None => offset,
                };
                placed.push((x, this_offset, tok.to_string()));
                x += GLYPH_COLS + 1;
            }
        }
    }
    placed
}

fn render_stub(
    latex: &NormalizedLatex,
    font: &str,
    dpi: u32,
    out_png: &Path,
) -> Result<(), RenderError> {
    let tokens: Vec<&str> = latex.token_strs().collect();
    if tokens.is_empty() {
        return Err(RenderError::CompileFailure("empty formula".into()));
    }
    for &tok in &tokens {
        if tok.starts_with('\\') && !KNOWN_COMMANDS.contains(&tok) {
            return Err(RenderError::CompileFailure(format!(
                "unknown command {tok}"
            )));
        }
    }
    let placed = layout(&tokens);
    let cell = ((dpi as f64 / 40.0).round() as u32).max(1);

    // glyph cache per distinct token
    let mut glyphs: HashMap<&str, Glyph> = HashMap::new();
    for (_, _, tok) in &placed {
        if !glyphs.contains_key(tok.as_str()) {
            glyphs.insert(tok.as_str(), glyph_for(tok, font));
        }
    }

    let min_off = placed.iter().map(|&(_, o, _)| o).min().unwrap_or(0);
    let max_off = placed.iter().map(|&(_, o, _)| o).max().unwrap_or(0);
    let width_cells = placed
        .iter()
        .map(|&(x, _, _)| x + GLYPH_COLS)
        .max()
        .unwrap_or(GLYPH_COLS) as u32;
    let height_cells = (max_off - min_off + GLYPH_ROWS) as u32;

    let w = width_cells * cell + 2 * MARGIN_PX;
    let h = height_cells * cell + 2 * MARGIN_PX;
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    for (gx, goff, tok) in &placed {
        let glyph = &glyphs[tok.as_str()];
        for (r, row) in glyph.bitmap.iter().enumerate() {
            for (c, &on) in row.iter().enumerate() {
                if !on {
                    continue;
                }
                let cy = (goff - min_off) as u32 + r as u32;
                let cx = *gx as u32 + c as u32;
                for py in 0..cell {
                    for px in 0..cell {
                        img.put_pixel(
                            MARGIN_PX + cx * cell + px,
                            MARGIN_PX + cy * cell + py,
                            Rgb([20, 20, 20]),
                        );
                    }
                }
            }
        }
    }
    if let Some(parent) = out_png.parent() {
        std::fs::create_dir_all(parent)?;
    }
    img.save(out_png)?;
    Ok(())
}
