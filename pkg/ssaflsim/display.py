"""Display utilities for run, comparison and diagnostic tables"""

from tabulate import tabulate

from ssaflsim.compare import comparison_header, comparison_records


def _fmt(value, digits=4):
    if value is None:
        return '-'
    if isinstance(value, float):
        return f"{value:.{digits}f}"
    return value


class DisplayTable:
    """Handle table display for simulator results"""

    def show_selection(self, scores, thresholds):
        """Selected nodes with similarity, suitability and upload threshold"""
        table_data = []
        for score in scores:
            table_data.append([score.node_id, _fmt(score.similarity), _fmt(score.resource),
                               _fmt(score.suitability), _fmt(thresholds.get(score.node_id), 5)])
        headers = ["Node", "Sim", "Resource", "H", "eps"]
        print("\n" + tabulate(table_data, headers=headers, tablefmt="grid"))

    def show_run_summaries(self, summaries):
        """One row per finished (method, seed) run"""
        table_data = []
        for s in summaries:
            table_data.append([s['method'], s['seed'], _fmt(s['final_mae']), _fmt(s['final_rmse']),
                               _fmt(s['final_r2']), s['total_uploads'], s['tau_max'],
                               _fmt(s['zeta_hat'])])

        headers = ["Method", "Seed", "MAE", "RMSE", "R²", "Uploads", "τ max", "ζ̂"]
        print("\n" + tabulate(table_data, headers=headers, tablefmt="grid"))

    def show_comparison(self, rows, reference):
        """Mean ± sd comparison table"""
        records = comparison_records(rows)
        table_data = [[_fmt(v) if isinstance(v, float) else (v if v is not None else '-') for v in r]
                      for r in records]
        print("\n" + tabulate(table_data, headers=comparison_header(reference), tablefmt="grid"))
        print("sd: population standard deviation (ddof=0)")

    def show_verification(self, strategy, p_s, verdict, p_min):
        table_data = [
            ["User", strategy.user],
            ["Goals", ', '.join(f"{g.metric} {g.op.value} {g.threshold:g}" for g in strategy.goals)],
            ["Actions", ', '.join(sorted(strategy.action_kinds))],
            ["p_S", _fmt(p_s)],
            ["p_min", _fmt(p_min)],
            ["Verdict", verdict.value],
        ]
        print("\n" + tabulate(table_data, tablefmt="grid"))

    def show_diagnostics(self, staleness, zeta, pl_report, gap):
        """Staleness, trigger bias, PL contraction and federated-gap report"""
        table_data = [
            ["τ max", staleness.tau_max],
            ["τ mean", _fmt(staleness.mean)],
            ["τ histogram", ', '.join(f"{t}:{c}" for t, c in staleness.histogram.items()) or '-'],
            ["ζ̂ (trigger bias)", _fmt(zeta, 6)],
        ]
        if pl_report is not None:
            table_data += [
                ["PL spectrum [μ̂, L̂]", f"[{pl_report.mu_hat:.4f}, {pl_report.L_hat:.4f}]"],
                ["PL η, E", f"{pl_report.eta:.4g}, {pl_report.local_epochs}"],
                ["PL contraction (fitted)", _fmt(pl_report.contraction)],
                ["PL bound 1 - μηE", _fmt(pl_report.contraction_bound)],
                ["PL plateau F - F*", f"{pl_report.plateau:.3e}"],
                ["PL events", pl_report.events],
            ]
        if gap is not None:
            table_data += [
                ["‖θ_fed - θ_central‖", _fmt(gap.param_distance)],
                ["Loss fed / central", f"{gap.federated_loss:.6f} / {gap.centralized_loss:.6f}"],
                ["R² fed / central", f"{gap.federated_r2:.4f} / {gap.centralized_r2:.4f}"],
            ]
        print("\n" + tabulate(table_data, headers=["Diagnostic", "Value"], tablefmt="grid"))
