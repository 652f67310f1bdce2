#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace mixrl::svg {

// Minimal SVG document builder for the analysis/plot outputs.
class Doc {
 public:
  Doc(double width, double height) : w_(width), h_(height) {}

  void rect(double x, double y, double w, double h, const std::string& fill,
            const std::string& stroke = "none", double opacity = 1.0) {
    body_ << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << w << "\" height=\"" << h
          << "\" fill=\"" << fill << "\" stroke=\"" << stroke << "\" fill-opacity=\"" << opacity
          << "\"/>\n";
  }
  void line(double x1, double y1, double x2, double y2, const std::string& stroke,
            double width = 1.0) {
    body_ << "<line x1=\"" << x1 << "\" y1=\"" << y1 << "\" x2=\"" << x2 << "\" y2=\"" << y2
          << "\" stroke=\"" << stroke << "\" stroke-width=\"" << width << "\"/>\n";
  }
  void circle(double cx, double cy, double r, const std::string& fill) {
    body_ << "<circle cx=\"" << cx << "\" cy=\"" << cy << "\" r=\"" << r << "\" fill=\"" << fill
          << "\"/>\n";
  }
  void polyline(const std::vector<std::array<double, 2>>& pts, const std::string& stroke,
                double width = 1.5) {
    body_ << "<polyline fill=\"none\" stroke=\"" << stroke << "\" stroke-width=\"" << width
          << "\" points=\"";
    for (const auto& p : pts) body_ << p[0] << "," << p[1] << " ";
    body_ << "\"/>\n";
  }
  void polygon(const std::vector<std::array<double, 2>>& pts, const std::string& fill,
               double opacity = 1.0) {
    body_ << "<polygon fill=\"" << fill << "\" fill-opacity=\"" << opacity << "\" points=\"";
    for (const auto& p : pts) body_ << p[0] << "," << p[1] << " ";
    body_ << "\"/>\n";
  }
  void text(double x, double y, const std::string& s, int size = 12,
            const std::string& anchor = "start") {
    body_ << "<text x=\"" << x << "\" y=\"" << y << "\" font-size=\"" << size
          << "\" font-family=\"sans-serif\" text-anchor=\"" << anchor << "\">" << s
          << "</text>\n";
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path.string());
    f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w_ << "\" height=\"" << h_
      << "\" viewBox=\"0 0 " << w_ << " " << h_ << "\">\n<rect width=\"100%\" height=\"100%\" "
      << "fill=\"white\"/>\n"
      << body_.str() << "</svg>\n";
  }

 private:
  double w_, h_;
  std::ostringstream body_;
};

// Blue-to-red gradient over [0, 1].
std::string heat_color(double t);

// Categorical palette for plot series.
std::string series_color(size_t i);

}  // namespace mixrl::svg
