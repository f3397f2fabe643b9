// Writes the synthetic grating corpus (see xbnn/dataset.hpp) to disk in both
// csv-rows and idx-binary form. Small enough to train a desk-scale binary
// CNN in seconds, structured enough that conv filters have something real to
// lock onto; the class-dependent background keeps the corpus brightness-
// asymmetric.

#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "xbnn/dataset.hpp"
#include "xbnn/errors.hpp"

int main(int argc, char** argv) {
  CLI::App app{"xbnn-fixtures: generate the synthetic grating corpus"};
  std::string out_dir = "fixtures";
  xbnn::GratingSpec spec;
  spec.per_class = 60;
  int test_per_class = 20;
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--train-per-class", spec.per_class, "training samples per class");
  app.add_option("--test-per-class", test_per_class, "test samples per class");
  app.add_option("--classes", spec.classes, "number of classes");
  app.add_option("--size", spec.size, "image side length");
  app.add_option("--noise", spec.noise, "additive Gaussian noise level");
  app.add_option("--seed", spec.seed, "generator seed");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    std::filesystem::create_directories(out_dir);
    spec.split_tag = 0;
    const xbnn::Dataset train = xbnn::synthetic_gratings(spec);
    xbnn::GratingSpec test_spec = spec;
    test_spec.per_class = test_per_class;
    test_spec.split_tag = 1;
    const xbnn::Dataset test = xbnn::synthetic_gratings(test_spec);
    xbnn::write_dataset_csv(train, out_dir + "/train.csv");
    xbnn::write_dataset_csv(test, out_dir + "/test.csv");
    xbnn::write_dataset_idx(train, out_dir + "/train-images.idx");
    xbnn::write_dataset_idx(test, out_dir + "/test-images.idx");
    std::cout << "wrote " << train.size() << " train / " << test.size() << " test samples to "
              << out_dir << "\n";
  } catch (const xbnn::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
