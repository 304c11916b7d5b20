use super::{AttentionSummary, Pca, SmoothnessResult};
use crate::error::{Error, Result};

pub const EVAL_SCHEMA_VERSION: u32 = 1;

fn write(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut out = format!("# schema_version: {EVAL_SCHEMA_VERSION}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        w.flush().map_err(|e| Error::Data(e.to_string()))?;
    }
    Ok(String::from_utf8(out).expect("csv output is utf-8"))
}

/// `id,pc1,pc2,fitness`; a missing second component is left empty.
pub fn latent_coords_csv(ids: &[String], pca: &Pca, fitness: &[f64]) -> Result<String> {
    if ids.len() != pca.coords.len() || fitness.len() != ids.len() {
        return Err(Error::Data("latent coordinate columns differ in length".into()));
    }
    write(
        &["id", "pc1", "pc2", "fitness"],
        ids.iter().zip(&pca.coords).zip(fitness).map(|((id, c), y)| {
            vec![id.clone(), c[0].to_string(), c.get(1).map(ToString::to_string).unwrap_or_default(), y.to_string()]
        }),
    )
}

/// `representation,signal,k,n,lambda`
pub fn smoothness_csv(rows: &[(String, SmoothnessResult)]) -> Result<String> {
    write(
        &["representation", "signal", "k", "n", "lambda"],
        rows.iter().map(|(rep, r)| vec![rep.clone(), r.signal.clone(), r.k.to_string(), r.n.to_string(), r.lambda.to_string()]),
    )
}

/// `row,col,weight` over the thresholded map.
pub fn attention_mean_csv(summary: &AttentionSummary) -> Result<String> {
    let l = summary.length;
    write(
        &["row", "col", "weight"],
        (0..l * l).map(|i| vec![(i / l).to_string(), (i % l).to_string(), summary.thresholded[i / l][i % l].to_string()]),
    )
}

/// `position,weight`
pub fn positional_attention_csv(summary: &AttentionSummary) -> Result<String> {
    write(
        &["position", "weight"],
        summary.positional.iter().enumerate().map(|(p, w)| vec![p.to_string(), w.to_string()]),
    )
}
