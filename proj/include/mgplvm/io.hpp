#pragma once

#include <charconv>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mgplvm/common.hpp"

namespace mgplvm {

/// Shortest decimal representation that round-trips the exact float64 value.
inline std::string format_double(double v) {
  char buf[40];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

/// Write an N x M matrix as `neuron_id,c0..c{M-1}` rows.
inline void write_activity_csv(const std::string& path, const MatrixXd& Y) {
  std::ofstream f(path);
  check(f.good(), "cannot open " + path + " for writing");
  f << "neuron_id";
  for (int j = 0; j < Y.cols(); ++j) f << ",c" << j;
  f << "\n";
  for (int i = 0; i < Y.rows(); ++i) {
    f << i;
    for (int j = 0; j < Y.cols(); ++j) f << "," << format_double(Y(i, j));
    f << "\n";
  }
}

inline MatrixXd read_activity_csv(const std::string& path) {
  std::ifstream f(path);
  check(f.good(), "cannot open " + path);
  std::string line;
  check(bool(std::getline(f, line)), path + ": empty file");
  auto header = split_csv_line(line);
  check(header.size() >= 3 && header[0] == "neuron_id",
        path + ": expected header 'neuron_id,c0,...'");
  int M = int(header.size()) - 1;
  std::vector<std::vector<double>> rows;
  int lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto cells = split_csv_line(line);
    check(int(cells.size()) == M + 1,
          path + ":" + std::to_string(lineno) + ": expected " + std::to_string(M + 1) +
              " columns, got " + std::to_string(cells.size()));
    std::vector<double> r(static_cast<std::size_t>(M));
    for (int j = 0; j < M; ++j) {
      try {
        r[std::size_t(j)] = std::stod(cells[std::size_t(j) + 1]);
      } catch (const std::exception&) {
        throw std::invalid_argument(path + ":" + std::to_string(lineno) +
                                    ": bad number '" + cells[std::size_t(j) + 1] + "'");
      }
    }
    rows.push_back(std::move(r));
  }
  check(!rows.empty(), path + ": no data rows");
  MatrixXd Y(rows.size(), M);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (int j = 0; j < M; ++j) Y(int(i), j) = rows[i][std::size_t(j)];
  return Y;
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream f(path);
  check(f.good(), "cannot open " + path + " for writing");
  f << content;
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream f(path);
  check(f.good(), "cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// Minimal SVG emitter for tuning-curve plots (polyline + heat rectangles).

class SvgCanvas {
public:
  SvgCanvas(double width, double height) : w_(width), h_(height) {
    body_ << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w_ << "\" height=\""
          << h_ << "\" viewBox=\"0 0 " << w_ << " " << h_ << "\">\n";
    body_ << "<rect width=\"" << w_ << "\" height=\"" << h_ << "\" fill=\"white\"/>\n";
  }

  void polyline(const std::vector<double>& xs, const std::vector<double>& ys,
                const std::string& color, double stroke_width = 1.5) {
    body_ << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\""
          << stroke_width << "\" points=\"";
    for (std::size_t i = 0; i < xs.size(); ++i) body_ << xs[i] << "," << ys[i] << " ";
    body_ << "\"/>\n";
  }

  void polygon(const std::vector<double>& xs, const std::vector<double>& ys,
               const std::string& fill, double opacity = 0.3) {
    body_ << "<polygon fill=\"" << fill << "\" fill-opacity=\"" << opacity
          << "\" stroke=\"none\" points=\"";
    for (std::size_t i = 0; i < xs.size(); ++i) body_ << xs[i] << "," << ys[i] << " ";
    body_ << "\"/>\n";
  }

  void rect(double x, double y, double w, double h, const std::string& fill) {
    body_ << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << w << "\" height=\""
          << h << "\" fill=\"" << fill << "\"/>\n";
  }

  void circle(double x, double y, double r, const std::string& fill) {
    body_ << "<circle cx=\"" << x << "\" cy=\"" << y << "\" r=\"" << r << "\" fill=\""
          << fill << "\"/>\n";
  }

  void text(double x, double y, const std::string& s, int size = 12) {
    body_ << "<text x=\"" << x << "\" y=\"" << y << "\" font-size=\"" << size
          << "\" font-family=\"sans-serif\">" << s << "</text>\n";
  }

  std::string finish() {
    body_ << "</svg>\n";
    return body_.str();
  }

  static std::string heat_color(double t) {  // t in [0,1], blue -> red
    t = clamp(t, 0.0, 1.0);
    int r = int(255 * t);
    int b = int(255 * (1 - t));
    int g = int(80 + 100 * (1 - std::abs(2 * t - 1)));
    std::ostringstream c;
    c << "rgb(" << r << "," << g << "," << b << ")";
    return c.str();
  }

private:
  double w_, h_;
  std::ostringstream body_;
};

}  // namespace mgplvm
