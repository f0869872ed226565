"""Excel export of method comparisons with one sheet per method"""

import os

from openpyxl import Workbook
from openpyxl.styles import Font, PatternFill, Alignment, Border, Side

from ssaflsim.compare import SD_NOTE, comparison_header, comparison_records


class ExcelExporter:
    """Handle Excel file export with multiple sheets"""

    def __init__(self):
        """Initialize exporter"""
        self.header_fill = PatternFill(start_color="366092", end_color="366092", fill_type="solid")
        self.header_font = Font(bold=True, color="FFFFFF", size=11)
        self.title_font = Font(bold=True, size=14)
        self.bold_font = Font(bold=True)
        self.border = Border(
            left=Side(style='thin'),
            right=Side(style='thin'),
            top=Side(style='thin'),
            bottom=Side(style='thin')
        )

    def _write_header(self, ws, row, headers):
        for col, header in enumerate(headers, start=1):
            cell = ws.cell(row=row, column=col)
            cell.value = header
            cell.fill = self.header_fill
            cell.font = self.header_font
            cell.alignment = Alignment(horizontal='center')
            cell.border = self.border

    def _write_row(self, ws, row, values):
        for col, value in enumerate(values, start=1):
            cell = ws.cell(row=row, column=col)
            cell.value = round(value, 6) if isinstance(value, float) else value
            cell.border = self.border

    def create_summary_sheet(self, wb, rows, reference):
        """Create the comparison sheet"""
        ws = wb.active
        ws.title = "Summary"

        ws['A1'] = "Method Comparison"
        ws['A1'].font = self.title_font
        ws.merge_cells('A1:J1')
        ws['A2'] = SD_NOTE.lstrip('# ')
        ws['A2'].font = Font(size=10, italic=True)
        ws.merge_cells('A2:J2')

        self._write_header(ws, 4, comparison_header(reference))
        row = 5
        for record in comparison_records(rows):
            self._write_row(ws, row, record)
            ws.cell(row=row, column=1).font = self.bold_font
            row += 1

        ws.column_dimensions['A'].width = 18
        for col in 'BCDEFGHI':
            ws.column_dimensions[col].width = 12
        ws.column_dimensions['J'].width = 28

    def create_method_sheet(self, wb, method, summaries):
        """Create one per-seed sheet for a method"""
        ws = wb.create_sheet(method[:31])

        ws['A1'] = f"{method} - Per-seed Results"
        ws['A1'].font = self.title_font
        ws.merge_cells('A1:H1')

        headers = ['Seed', 'MAE', 'RMSE', 'R²', 'Uploads', 'τ max', 'ζ̂', 'Events']
        self._write_header(ws, 3, headers)
        row = 4
        for s in sorted(summaries, key=lambda x: x.get('seed', 0)):
            self._write_row(ws, row, [s.get('seed'), s['final_mae'], s['final_rmse'], s['final_r2'],
                                      s['total_uploads'], s['tau_max'], s['zeta_hat'], s['wall_events']])
            row += 1

        # Per-node upload counts
        row += 1
        ws[f'A{row}'] = "Uploads per node (Γ)"
        ws[f'A{row}'].font = Font(bold=True, size=12)
        row += 1
        nodes = sorted({int(n) for s in summaries for n in s['per_node_gamma']})
        self._write_header(ws, row, ['Seed'] + [f"node {n}" for n in nodes])
        row += 1
        for s in sorted(summaries, key=lambda x: x.get('seed', 0)):
            gamma = s['per_node_gamma']
            self._write_row(ws, row, [s.get('seed')] + [gamma.get(str(n)) for n in nodes])
            row += 1

        ws.column_dimensions['A'].width = 14
        for col in 'BCDEFGH':
            ws.column_dimensions[col].width = 12

    def export(self, rows, summaries, out_dir, reference='SemiAsyn'):
        """Write comparison.xlsx into out_dir and return its path"""
        wb = Workbook()
        self.create_summary_sheet(wb, rows, reference)

        by_method = {}
        for s in summaries:
            by_method.setdefault(s['method'], []).append(s)
        for row in rows:
            self.create_method_sheet(wb, row.method, by_method.get(row.method, []))

        os.makedirs(out_dir, exist_ok=True)
        filename = os.path.join(out_dir, "comparison.xlsx")
        wb.save(filename)

        return filename
