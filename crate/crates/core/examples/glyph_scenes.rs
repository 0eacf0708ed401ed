//! Render a captioned glyph scene, degrade it and read it back with the toy
//! OCR. Writes `gt.ppm`, `lq.ppm` and `bilinear.ppm` to the directory given
//! as the first argument (default: a temp dir).

use onestep_sr::codec::upsample_bilinear;
use onestep_sr::datagen::font::glyphs_to_string;
use onestep_sr::datagen::{degrade_with_draw, render_scene, toy_ocr, write_ppm, DegradationConfig, SceneConfig, FACTOR};
use onestep_sr::metrics::{ned, psnr};

fn main() -> onestep_sr::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("glyph_scenes"));
    std::fs::create_dir_all(&out)?;

    let cfg = SceneConfig::default();
    let lattice = cfg.lattice();
    let scene = render_scene(7, &cfg)?;
    let (lq, draw) = degrade_with_draw(&scene.image, &DegradationConfig::default(), 8)?;
    let up = upsample_bilinear(&lq, FACTOR);

    println!("caption      {}", glyphs_to_string(&scene.caption));
    println!("texture      {:?}", scene.background.texture);
    println!("degradation  {draw:?}");
    for (name, img) in [("gt", &scene.image), ("bilinear", &up)] {
        let read = toy_ocr(img, &lattice);
        println!(
            "{name:<9} ocr {:<18} ned {:.3}  psnr {:.2} dB",
            glyphs_to_string(&read),
            ned(&read, &scene.caption),
            psnr(img, &scene.image)?
        );
    }
    write_ppm(&out.join("gt.ppm"), &scene.image)?;
    write_ppm(&out.join("lq.ppm"), &lq)?;
    write_ppm(&out.join("bilinear.ppm"), &up)?;
    println!("wrote {}", out.display());
    Ok(())
}
