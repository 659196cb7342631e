//! Codec and velocity-model checkpoints.

use std::path::Path;

use anyhow::{bail, Context, Result};
use rffusion::checkpoint::Checkpoint;
use rffusion::codec::{CodecParams, Freeze};
use rffusion::flow::{VelocityKind, VelocityModel};
use rffusion::Tensor;

const FREEZE_KEY: &str = "codec.freeze";

pub fn codec_checkpoint(p: &CodecParams) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new();
    ck.insert_params(&p.encoder)?;
    ck.insert_params(&p.decoder)?;
    let flag = match p.freeze {
        Freeze::None => 0.0,
        Freeze::Encoder => 1.0,
    };
    ck.insert_real(FREEZE_KEY, Tensor::scalar(flag))?;
    Ok(ck)
}

pub fn codec_from_checkpoint(ck: &Checkpoint) -> Result<CodecParams> {
    let freeze = match ck.real(FREEZE_KEY).map(Tensor::item) {
        Ok(f) if f != 0.0 => Freeze::Encoder,
        _ => Freeze::None,
    };
    Ok(CodecParams::from_parts(ck.params("encoder.")?, ck.params("decoder.")?, freeze)?)
}

pub fn save_codec(p: &CodecParams, path: &Path) -> Result<()> {
    crate::data::ensure_parent(path)?;
    codec_checkpoint(p)?.save(path).with_context(|| format!("writing {}", path.display()))
}

pub fn load_codec(path: &Path) -> Result<CodecParams> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading codec checkpoint {}", path.display()))?;
    codec_from_checkpoint(&ck).with_context(|| format!("{} is not a codec checkpoint", path.display()))
}

pub fn save_flow(m: &VelocityModel, path: &Path) -> Result<()> {
    if !matches!(m.kind(), VelocityKind::Mlp { .. }) {
        bail!("only MLP velocity models have weights to save");
    }
    crate::data::ensure_parent(path)?;
    let mut ck = Checkpoint::new();
    ck.insert_params(m.params())?;
    ck.save(path).with_context(|| format!("writing {}", path.display()))
}

pub fn load_flow(path: &Path) -> Result<VelocityModel> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading flow checkpoint {}", path.display()))?;
    let params = ck.params("mlp.").with_context(|| format!("{} is not a flow checkpoint", path.display()))?;
    Ok(VelocityModel::mlp_from_params(params)?)
}
