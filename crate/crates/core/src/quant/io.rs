//! Quantized model file: the base `GQM1` model followed by one `GQQ1`
//! section per quantization parameter (b u8, s f32, z i32, n i32, p i32,
//! stage u8, optional v/u payloads). Weight sections are named after their
//! parameter; activation sections after their site index.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nnkit::io::{model_from_reader, model_to_bytes, write_name, write_tensor_body};
use crate::quant::{QuantParam, QuantizedModel, Role, Stage};

const QUANT_MAGIC: &[u8; 4] = b"GQQ1";

fn write_qparam(out: &mut Vec<u8>, name: &str, q: &QuantParam) {
    out.extend_from_slice(QUANT_MAGIC);
    write_name(out, name);
    out.push(q.bits);
    out.extend_from_slice(&q.step.to_le_bytes());
    out.extend_from_slice(&q.zero.to_le_bytes());
    out.extend_from_slice(&q.qmin.to_le_bytes());
    out.extend_from_slice(&q.qmax.to_le_bytes());
    out.push(q.stage.tag());
    for t in [&q.v, &q.u] {
        match t {
            Some(t) => {
                out.push(1);
                write_tensor_body(out, t);
            }
            None => out.push(0),
        }
    }
}

pub fn quantized_to_bytes(qm: &QuantizedModel) -> Vec<u8> {
    let mut out = model_to_bytes(&qm.model);
    let indices = qm.model.weight_param_indices();
    for (k, q) in qm.wq.iter().enumerate() {
        let name = format!("w:{}", qm.model.params[indices[k]].name);
        write_qparam(&mut out, &name, q);
    }
    for (site, q) in qm.aq.iter().enumerate() {
        write_qparam(&mut out, &format!("a:{site}"), q);
    }
    out
}

pub fn save_quantized(qm: &QuantizedModel, path: impl AsRef<Path>) -> Result<()> {
    let bytes = quantized_to_bytes(qm);
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_quantized(path: impl AsRef<Path>) -> Result<QuantizedModel> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let (model, mut r) = model_from_reader(&buf)?;
    let indices = model.weight_param_indices();
    let mut wq: Vec<Option<QuantParam>> = vec![None; indices.len()];
    let mut aq: Vec<Option<QuantParam>> = vec![None; model.num_act_sites()];
    let mut any = false;
    while r.has_more() {
        r.expect_magic(QUANT_MAGIC)?;
        let name = r.name()?;
        let bits = r.u8("bits")?;
        let step = r.f32("step")?;
        let zero = r.i32("zero")?;
        let qmin = r.i32("qmin")?;
        let qmax = r.i32("qmax")?;
        let stage = Stage::from_tag(r.u8("stage")?)?;
        let v = r.option_tensor()?;
        let u = r.option_tensor()?;
        let role = if name.starts_with("w:") {
            Role::Weight
        } else {
            Role::Activation
        };
        let mut q = QuantParam::new(bits, step, zero, role)?;
        if q.qmin != qmin || q.qmax != qmax {
            return Err(Error::format(format!(
                "section {name:?}: bounds [{qmin},{qmax}] do not match {bits}-bit range"
            )));
        }
        q.stage = stage;
        q.v = v;
        q.u = u;
        any = true;
        if let Some(pname) = name.strip_prefix("w:") {
            let Some(k) = indices
                .iter()
                .position(|&pidx| model.params[pidx].name == pname)
            else {
                return Err(Error::format(format!("unknown weight section {name:?}")));
            };
            if wq[k].is_some() {
                return Err(Error::format(format!("duplicate weight section {name:?}")));
            }
            wq[k] = Some(q);
        } else if let Some(sname) = name.strip_prefix("a:") {
            let site: usize = sname
                .parse()
                .map_err(|_| Error::format(format!("bad activation section {name:?}")))?;
            if site >= aq.len() || aq[site].is_some() {
                return Err(Error::format(format!("bad or duplicate section {name:?}")));
            }
            aq[site] = Some(q);
        } else {
            return Err(Error::format(format!("unrecognized section {name:?}")));
        }
    }
    if !any {
        return Err(Error::format("no quantization sections in file"));
    }
    let wq: Vec<QuantParam> = wq
        .into_iter()
        .enumerate()
        .map(|(k, q)| q.ok_or_else(|| Error::format(format!("missing weight section {k}"))))
        .collect::<Result<_>>()?;
    let aq_present = aq.iter().any(|q| q.is_some());
    let aq: Vec<QuantParam> = if aq_present {
        aq.into_iter()
            .enumerate()
            .map(|(s, q)| q.ok_or_else(|| Error::format(format!("missing activation section {s}"))))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let stage = wq
        .iter()
        .map(|q| q.stage)
        .min()
        .unwrap_or(Stage::Calibrated);
    let wbits = wq.first().map(|q| q.bits).unwrap_or(8);
    let abits = aq.first().map(|q| q.bits).unwrap_or(8);
    Ok(QuantizedModel {
        model,
        wbits,
        abits,
        wq,
        aq,
        stage,
    })
}
