#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <set>

#include "helpers.hpp"
#include "robustkd/data.hpp"

using namespace robustkd;

namespace {

BlobParams small_blobs(double noise, std::uint64_t seed = 0) {
  BlobParams bp;
  bp.train_per_class = 20;
  bp.test_per_class = 5;
  bp.noise_std = noise;
  bp.seed = seed;
  return bp;
}

}  // namespace

TEST_CASE("blobs: zero noise makes every class member identical") {
  const auto d = generate_blobs(small_blobs(0.0));
  for (std::size_t c = 0; c < 10; ++c) {
    std::vector<Tensor> members;
    for (std::size_t i = 0; i < d.train.size(); ++i)
      if (d.train.labels[i] == c) members.push_back(d.train.image(i));
    for (std::size_t i = 0; i < d.test.size(); ++i)
      if (d.test.labels[i] == c) members.push_back(d.test.image(i));
    REQUIRE(members.size() == 25);
    for (const auto& m : members) CHECK(m == members.front());
  }
}

TEST_CASE("blobs: class patterns are distinct, splits sized, values in [0,1]") {
  const auto d = generate_blobs(small_blobs(0.0));
  std::set<std::vector<double>> patterns;
  for (std::size_t i = 0; i < d.train.size(); ++i) patterns.insert(d.train.image(i).values());
  CHECK(patterns.size() == 10);

  const auto noisy = generate_blobs(small_blobs(0.4, 7));
  CHECK(noisy.train.size() == 200);
  CHECK(noisy.test.size() == 50);
  CHECK(noisy.train.split == Split::train);
  CHECK(noisy.test.split == Split::test);
  for (double v : noisy.train.images.values()) CHECK((v >= 0.0 && v <= 1.0));
  // Disjoint: no noisy test image repeats a training image.
  std::set<std::vector<double>> train_images;
  for (std::size_t i = 0; i < noisy.train.size(); ++i) train_images.insert(noisy.train.image(i).values());
  for (std::size_t i = 0; i < noisy.test.size(); ++i) CHECK(train_images.count(noisy.test.image(i).values()) == 0);

  CHECK(generate_blobs(small_blobs(0.4, 7)).train.images == noisy.train.images);
  CHECK_FALSE(generate_blobs(small_blobs(0.4, 8)).train.images == noisy.train.images);
}

TEST_CASE("blobs: invalid parameters rejected") {
  BlobParams bp = small_blobs(0.1);
  bp.num_classes = 1;
  CHECK_THROWS_AS(generate_blobs(bp), ValidationError);
  bp = small_blobs(0.1);
  bp.train_per_class = 0;
  CHECK_THROWS_AS(generate_blobs(bp), ValidationError);
  bp = small_blobs(0.1);
  bp.noise_std = -1.0;
  CHECK_THROWS_AS(generate_blobs(bp), ValidationError);
}

TEST_CASE("trigger: patch locality and blending") {
  const auto d = generate_blobs(small_blobs(0.3, 1));
  const auto spec = corner_trigger({1, 16, 16}, 3, 0);
  const Tensor img = d.test.image(0);
  const Tensor patched = apply_trigger(img, spec);
  std::size_t changed = 0;
  for (std::size_t i = 0; i < img.size(); ++i) changed += img[i] != patched[i];
  CHECK(changed <= 9);
  for (std::size_t r = 13; r < 16; ++r)
    for (std::size_t c = 13; c < 16; ++c) CHECK(patched[r * 16 + c] == 1.0);

  auto half = spec;
  half.blend = 0.5;
  const Tensor blended = apply_trigger(img, half);
  CHECK(blended[15 * 16 + 15] == doctest::Approx(0.5 * img[15 * 16 + 15] + 0.5));
  CHECK(blended[0] == img[0]);

  auto outside = spec;
  outside.row = 15;
  CHECK_THROWS_AS(outside.validate({1, 16, 16}, 10), ValidationError);
  auto bad_label = spec;
  bad_label.target_label = 10;
  CHECK_THROWS_AS(bad_label.validate({1, 16, 16}, 10), ValidationError);
}

TEST_CASE("poisoning: counts, bookkeeping, relabelling") {
  BlobParams bp = small_blobs(0.3, 2);
  bp.train_per_class = 100;
  const auto d = generate_blobs(bp);
  REQUIRE(d.train.size() == 1000);
  const auto spec = corner_trigger({1, 16, 16}, 3, 4);
  const auto p = poison_dataset(d.train, spec, 0.1, 5);
  CHECK(p.poisoned.size() == 100);
  CHECK(std::is_sorted(p.poisoned.begin(), p.poisoned.end()));
  std::set<std::size_t> modified;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (!(p.image(i) == d.train.image(i)) || p.labels[i] != d.train.labels[i]) modified.insert(i);
  // Recorded indices are exactly those touched (a patch may leave an image
  // unchanged only if it already matched, which the noisy data rules out).
  CHECK(std::vector<std::size_t>(modified.begin(), modified.end()) == p.poisoned);
  for (auto i : p.poisoned) CHECK(p.labels[i] == 4);

  CHECK(poison_dataset(d.train, spec, 0.1, 5).poisoned == p.poisoned);
  const auto all = poison_dataset(d.train, spec, 1.0, 5);
  for (auto l : all.labels) CHECK(l == 4);
  CHECK_THROWS_AS(poison_dataset(d.test, spec, 0.1, 5), ValidationError);
  CHECK_THROWS_AS(poison_dataset(d.train, spec, 0.0, 5), ValidationError);
}

TEST_CASE("dataset text format round-trips") {
  const auto d = generate_blobs(small_blobs(0.3, 4));
  const auto path = std::filesystem::temp_directory_path() / "rkd_dataset_test.txt";
  save_dataset_text(d.test, path.string());
  const auto back = load_dataset_text(path.string(), Split::test);
  CHECK(back.images == d.test.images);
  CHECK(back.labels == d.test.labels);
  CHECK(back.num_classes == d.test.num_classes);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_dataset_text("/nonexistent/data.txt"), ValidationError);
}
