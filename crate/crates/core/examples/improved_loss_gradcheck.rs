//! The confusion-penalizing loss, its closed-form gradient, and the
//! finite-difference check behind `cfnet gradcheck`.

use confusion_subnets::loss::{
    improved_ce, improved_ce_grad, run_gradcheck, standard_ce, GradcheckConfig, OneHotLabel,
};
use confusion_subnets::numeric::{softmax, LogitVector};
use confusion_subnets::{DenseMatrix, LossConfig, WeightMatrix};

fn main() -> confusion_subnets::Result<()> {
    let logits = LogitVector::new(vec![2.0, 1.5, -0.5])?;
    let q = softmax(&logits);
    let label = OneHotLabel::new(0, 3)?;
    // class 0 is often mistaken for class 1
    let c = WeightMatrix::new(DenseMatrix::from_rows(&[
        vec![1.0, 0.3, 0.0],
        vec![0.2, 1.0, 0.0],
        vec![0.0, 0.0, 1.0],
    ])?)?;

    println!("q = {:?}", q.values());
    println!("standard CE        {:.6}", standard_ce(&q, &label)?);
    for lambda in [0.0, 1.0, 5.0] {
        let cfg = LossConfig::new(lambda, c.clone())?;
        let grad = improved_ce_grad(&logits, &label, &cfg)?;
        println!(
            "lambda {lambda}: loss {:.6}  grad [{:+.4}, {:+.4}, {:+.4}]",
            improved_ce(&q, &label, &cfg)?,
            grad[0],
            grad[1],
            grad[2]
        );
    }

    let report = run_gradcheck(&GradcheckConfig::default())?;
    println!(
        "gradcheck: {} trials, max relative error {:.2e}, max absolute error {:.2e}",
        report.trials, report.max_relative_error, report.max_abs_error
    );
    Ok(())
}
